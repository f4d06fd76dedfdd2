"""Wires the devices, buffer pool, log and tree into one storage engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import core
from .btree import BTree
from .bufferpool import NVM, BufferPool, PlacementConfig, SsdStore
from .core import ChecksumPolicy
from .errors import ConfigError, ProtocolError
from .recovery import RestartContext, restart, rollback
from .simpmem import CrashImage, SimPmem
from .wal import LogDevice, RecType


@dataclass
class EngineConfig:
    page_size: int = core.DEFAULT_PAGE_SIZE
    dram_frames: int = 64
    nvm_slots: int = 512
    ssd_pages: int = 4096
    cache_capacity_lines: int = 512
    seed: int = 0
    checksum_policy: ChecksumPolicy = field(default_factory=ChecksumPolicy)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    optimistic: bool = True
    max_key: int = 128
    max_value: int = 256

    def validate(self):
        if not 256 <= self.page_size <= 32768 or self.page_size % 64:
            raise ConfigError("page size must be a multiple of 64 in [256, 32768]")
        if self.ssd_pages < 2:
            raise ConfigError("the store needs room for the meta page and the root")
        if self.nvm_slots < 1 or self.dram_frames < 0 or self.cache_capacity_lines < 1:
            raise ConfigError("capacities must be positive")
        core.check_geometry(self.page_size, self.checksum_policy.fragments)


@dataclass
class CrashState:
    """Everything that survives a crash: SSD pages, the NVM image, the durable log."""

    ssd: SsdStore
    nvm: CrashImage
    log: bytes

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.ssd.dump(d / "ssd.img")
        (d / "nvm.img").write_bytes(self.nvm.data)
        (d / "log.bin").write_bytes(self.log)

    @classmethod
    def load(cls, directory, page_size: int) -> "CrashState":
        d = Path(directory)
        return cls(SsdStore.load(d / "ssd.img", page_size),
                   CrashImage((d / "nvm.img").read_bytes()),
                   (d / "log.bin").read_bytes())


class Engine:
    def __init__(self, config: EngineConfig, ssd: SsdStore, nvm: SimPmem, log: LogDevice):
        config.validate()
        self.config = config
        self.ssd, self.nvm, self.log = ssd, nvm, log
        self.pool = BufferPool(ssd, log, nvm, config.dram_frames, config.nvm_slots,
                               config.checksum_policy, config.placement, config.optimistic)
        self.tree = BTree(self.pool, config.max_key, config.max_value)
        self.next_txn = 1
        self.active: set[int] = set()
        self.restart_ctx: RestartContext | None = None

    @classmethod
    def create(cls, config: EngineConfig) -> "Engine":
        config.validate()
        ssd = SsdStore(config.ssd_pages, config.page_size)
        BTree.format_store(ssd, config.checksum_policy)
        nvm = SimPmem(config.nvm_slots * config.page_size, config.cache_capacity_lines, config.seed)
        return cls(config, ssd, nvm, LogDevice())

    @classmethod
    def recover(cls, config: EngineConfig, state: CrashState, mode: str = "on_demand",
                seed: int | None = None) -> "Engine":
        """Reopen from crash images and run restart (analysis, then repair and undo)."""
        nvm = SimPmem(len(state.nvm.data), config.cache_capacity_lines,
                      config.seed + 1 if seed is None else seed, image=state.nvm.data)
        log = LogDevice.from_bytes(state.log)
        # private copy so one crash state can be recovered more than once
        ssd = SsdStore(state.ssd.page_count, state.ssd.page_size, state.ssd.data)
        eng = cls(config, ssd, nvm, log)
        eng.restart_ctx = restart(eng.pool, log, mode)
        txns = eng.restart_ctx.analysis.last_txn_lsn
        eng.next_txn = max(txns, default=0) + 1
        return eng

    # -- transactions ----------------------------------------------------
    def begin(self) -> int:
        txn = self.next_txn
        self.next_txn += 1
        self.active.add(txn)
        return txn

    def _check_active(self, txn: int):
        if txn not in self.active:
            raise ProtocolError(f"transaction {txn} is not active")

    def commit(self, txn: int) -> int:
        """Append COMMIT and force the log through it."""
        self._check_active(txn)
        lsn = self.log.append(RecType.COMMIT, txn)
        self.log.flush(lsn)
        self.active.discard(txn)
        return lsn

    def abort(self, txn: int) -> int:
        """Roll back with CLRs; the ABORT record is not forced."""
        self._check_active(txn)
        clrs = rollback(self.pool, self.log, txn, self.log.txn_tail(txn))
        self.active.discard(txn)
        return clrs

    # -- key/value surface -----------------------------------------------
    def insert(self, txn: int, key: bytes, value: bytes) -> None:
        self._check_active(txn)
        self.tree.insert(txn, key, value)

    def delete(self, txn: int, key: bytes) -> bool:
        self._check_active(txn)
        return self.tree.delete(txn, key)

    def lookup(self, key: bytes):
        return self.tree.lookup(key)

    def items(self):
        return self.tree.items()

    # -- failure ---------------------------------------------------------
    def crash(self) -> CrashState:
        """Drop every volatile byte: CPU cache, DRAM frames, the log tail."""
        return CrashState(self.ssd, self.nvm.crash(), self.log.crash())

    def quiesce(self) -> None:
        self.log.flush_all()

    def counters(self) -> dict:
        out = self.nvm.counters.as_dict()
        out.update(self.pool.stats.as_dict())
        out.update(ssd_reads=self.ssd.reads, ssd_writes=self.ssd.writes,
                   wal_violations=self.ssd.wal_violations, log_flushes=self.log.flushes)
        return out


__all__ = ["CrashState", "Engine", "EngineConfig", "NVM"]
