"""Three-tier page residence: DRAM frames, an NVM region, and the SSD store.

Pages load from SSD into NVM by default and are updated there in place with
plain stores: no flush and no fence. Pages that heat up (``k_p`` accesses
within a window of ``w`` fixes) are promoted to DRAM, or admitted there
directly when the heating access is a miss. DRAM victims (LRU) are
demoted back to NVM. NVM victims (CLOCK) are written to SSD when dirty, and
only after the log is durable up to their pageLSN.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from pathlib import Path

from . import core
from .core import HEADER_SIZE, NULL_PAGE, PAGE_FREE, ChecksumPolicy
from .errors import BoundsError, CapacityError, ConfigError, ProtocolError
from .simpmem import SimPmem
from .wal import LogDevice, RecType

READ = "r"
WRITE = "w"
DRAM = "dram"
NVM = "nvm"

_FREE_HEADER = core.PageHeader(NULL_PAGE, 0, 0, PAGE_FREE, 0).pack()


class SsdStore:
    """Durable page array; each page write is atomic.

    ``durable_lsn`` is a callable returning the log's durable LSN so that
    every write can be checked against the WAL rule.
    """

    def __init__(self, page_count: int, page_size: int = core.DEFAULT_PAGE_SIZE, data=None):
        if page_count < 1:
            raise ConfigError("SSD store needs at least one page")
        self.page_count = page_count
        self.page_size = page_size
        size = page_count * page_size
        if data is None:
            self.data = bytearray(size)
        else:
            if len(data) != size:
                raise ConfigError(f"store image is {len(data)} bytes, expected {size}")
            self.data = bytearray(data)
        self.durable_lsn = lambda: 0
        self.reads = 0
        self.writes = 0
        self.wal_violations = 0
        self.max_written_lsn = 0

    def _check(self, pid: int):
        if not 0 <= pid < self.page_count:
            raise BoundsError(f"page {pid} outside store of {self.page_count} pages")

    def read(self, pid: int) -> bytearray:
        self._check(pid)
        self.reads += 1
        base = pid * self.page_size
        return self.data[base:base + self.page_size]

    def peek_lsn(self, pid: int) -> int:
        """pageLSN of the stored image (header metadata; not counted as I/O)."""
        self._check(pid)
        return core.page_lsn(memoryview(self.data)[pid * self.page_size:])

    def is_formatted(self, pid: int) -> bool:
        self._check(pid)
        base = pid * self.page_size
        return self.data[base + 24] != PAGE_FREE

    def write(self, pid: int, image) -> None:
        self._check(pid)
        if len(image) != self.page_size:
            raise BoundsError("page image has the wrong size")
        if not core.verify_page(image):
            raise ProtocolError(f"refusing to store unsealed image of page {pid}")
        lsn = core.page_lsn(image)
        if lsn > self.durable_lsn():
            self.wal_violations += 1
        self.max_written_lsn = max(self.max_written_lsn, lsn)
        base = pid * self.page_size
        self.data[base:base + self.page_size] = image
        self.writes += 1

    def dump(self, path) -> None:
        Path(path).write_bytes(bytes(self.data))

    @classmethod
    def load(cls, path, page_size: int = core.DEFAULT_PAGE_SIZE) -> "SsdStore":
        data = Path(path).read_bytes()
        if len(data) % page_size:
            raise ConfigError("store file is not a whole number of pages")
        return cls(len(data) // page_size, page_size, data)


@dataclass(frozen=True)
class PlacementConfig:
    promotion_threshold: int = 2
    window: int = 32
    admission: str = NVM
    a1_capacity: int = 1024

    def __post_init__(self):
        if self.promotion_threshold < 1 or self.window < 1:
            raise ConfigError("promotion threshold and window must be positive")
        if self.admission not in (NVM, DRAM):
            raise ConfigError(f"admission tier must be {NVM!r} or {DRAM!r}")


class PlacementPolicy:
    """Simplified 2Q: an access-history probation queue plus a hot LRU."""

    def __init__(self, config: PlacementConfig):
        self.config = config
        self.a1: OrderedDict[int, deque] = OrderedDict()
        self.am: OrderedDict[int, None] = OrderedDict()
        self.tick = 0

    def record_access(self, pid: int) -> bool:
        """Note one fix of ``pid``; return True if the page is heating up.

        The history counts every fix whatever tier serves it, so the answer
        depends on the access trace alone.
        """
        self.tick += 1
        if pid in self.am:
            self.am.move_to_end(pid)
        hist = self.a1.get(pid)
        if hist is None:
            hist = self.a1[pid] = deque(maxlen=self.config.promotion_threshold)
            if len(self.a1) > self.config.a1_capacity:
                self.a1.popitem(last=False)
        hist.append(self.tick)
        return (len(hist) == self.config.promotion_threshold
                and self.tick - hist[0] < self.config.window)

    def promoted(self, pid: int):
        self.am[pid] = None

    def demoted(self, pid: int):
        self.am.pop(pid, None)

    def lru_victims(self):
        return iter(self.am)


@dataclass
class PoolStats:
    fixes: int = 0
    dram_hits: int = 0
    nvm_hits: int = 0
    misses: int = 0
    promotions: int = 0
    demotions: int = 0
    nvm_evictions: int = 0
    dram_evictions: int = 0
    ssd_writebacks: int = 0
    nvm_page_writes: int = 0
    nvm_wal_lead_writes: int = 0
    max_nvm_wal_lead: int = 0
    updates: int = 0

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class PageHandle:
    page_id: int
    tier: str
    index: int
    intent: str
    released: bool = field(default=False, compare=False)


class BufferPool:
    def __init__(self, ssd: SsdStore, log: LogDevice, nvm: SimPmem, dram_frames: int,
                 nvm_slots: int, policy: ChecksumPolicy | None = None,
                 placement: PlacementConfig | None = None, optimistic: bool = True):
        self.page_size = ps = ssd.page_size
        if nvm_slots < 1:
            raise ConfigError("at least one NVM slot is required")
        if dram_frames < 0:
            raise ConfigError("DRAM frame count cannot be negative")
        if nvm.capacity < nvm_slots * ps:
            raise ConfigError("NVM device too small for the slot count")
        self.ssd, self.log, self.nvm = ssd, log, nvm
        ssd.durable_lsn = lambda: log.durable_lsn
        self.policy = policy or ChecksumPolicy()
        core.check_geometry(ps, self.policy.fragments)
        self.placement = PlacementPolicy(placement or PlacementConfig())
        if self.placement.config.admission == DRAM and dram_frames == 0:
            raise ConfigError("DRAM admission needs DRAM frames")
        self.optimistic = optimistic
        self.dram_frames, self.nvm_slots = dram_frames, nvm_slots
        self.stats = PoolStats()

        self.frames: list[bytearray | None] = [None] * dram_frames
        self.frame_pid = [NULL_PAGE] * dram_frames
        self.frame_map: dict[int, int] = {}
        self.frame_dirty = [False] * dram_frames
        self.frame_pins = [0] * dram_frames
        self.frame_unsealed = [0] * dram_frames
        self.free_frames = list(range(dram_frames - 1, -1, -1))

        self.slot_pid = [NULL_PAGE] * nvm_slots
        self.slot_map: dict[int, int] = {}
        self.slot_dirty = [False] * nvm_slots
        self.slot_pins = [0] * nvm_slots
        self.slot_ref = [False] * nvm_slots
        self.slot_unsealed = [0] * nvm_slots
        self.free_slots = list(range(nvm_slots - 1, -1, -1))
        self._clock = 0
        self._cleaner_cursor = 0

        # post-crash state: NVM images not yet classified, and the repair hook
        self.suspect: set[int] = set()
        self.nvm_candidates: dict[int, list[int]] = {}
        self.recovery = None
        self.trace: list[int] | None = None

    # -- NVM plumbing --------------------------------------------------
    def _slot_addr(self, slot: int) -> int:
        return slot * self.page_size

    def read_slot(self, slot: int) -> bytearray:
        return bytearray(self.nvm.read(self._slot_addr(slot), self.page_size))

    def _persist(self, addr: int, length: int):
        if not self.optimistic:
            self.nvm.flush(addr, length)
            self.nvm.fence()

    def _note_lead(self, lsn: int):
        lead = lsn - self.log.durable_lsn
        if lead > 0:
            self.stats.nvm_wal_lead_writes += 1
            self.stats.max_nvm_wal_lead = max(self.stats.max_nvm_wal_lead, lead)

    def _write_slot_image(self, slot: int, image) -> None:
        addr = self._slot_addr(slot)
        self.nvm.write(addr, image)
        self.stats.nvm_page_writes += 1
        self._note_lead(core.page_lsn(image))
        self._persist(addr, self.page_size)

    def _release_slot(self, slot: int, mark: bool = True) -> None:
        pid = self.slot_pid[slot]
        if pid != NULL_PAGE and self.slot_map.get(pid) == slot:
            del self.slot_map[pid]
        self.slot_pid[slot] = NULL_PAGE
        self.slot_dirty[slot] = False
        self.slot_unsealed[slot] = 0
        self.slot_ref[slot] = False
        if mark:
            addr = self._slot_addr(slot)
            self.nvm.write(addr, _FREE_HEADER)
            self._persist(addr, HEADER_SIZE)
        self.free_slots.append(slot)

    def adopt_slot(self, slot: int, pid: int, dirty: bool) -> None:
        """Bind an NVM slot that already holds ``pid`` (used by restart)."""
        if slot in self.free_slots:
            self.free_slots.remove(slot)
        self.slot_pid[slot] = pid
        self.slot_map[pid] = slot
        self.slot_dirty[slot] = dirty
        self.slot_unsealed[slot] = 0
        self.slot_ref[slot] = True

    def install_nvm(self, pid: int, image, dirty: bool, slot: int | None = None) -> int:
        if slot is None:
            slot = self._get_slot()
        elif slot in self.free_slots:
            self.free_slots.remove(slot)
        self._write_slot_image(slot, image)
        self.adopt_slot(slot, pid, dirty)
        return slot

    def discard_slot(self, slot: int) -> None:
        self._release_slot(slot)

    # -- victim selection ------------------------------------------------
    def _get_slot(self) -> int:
        if self.free_slots:
            return self.free_slots.pop()
        for _ in range(2 * self.nvm_slots):
            slot = self._clock
            self._clock = (self._clock + 1) % self.nvm_slots
            if self.slot_pins[slot]:
                continue
            if self.slot_ref[slot]:
                self.slot_ref[slot] = False
                continue
            self._evict_slot(slot)
            return self.free_slots.pop()
        raise CapacityError("all NVM slots are pinned")

    def _evict_slot(self, slot: int) -> None:
        pid = self.slot_pid[slot]
        cands = self.nvm_candidates.get(pid)
        if cands and slot in cands:
            # unverified post-crash image: drop it, SSD plus log still rebuild the page
            cands.remove(slot)
            if not cands:
                del self.nvm_candidates[pid]
                self.suspect.discard(pid)
        elif self.slot_dirty[slot]:
            self._write_back(NVM, slot)
        self._release_slot(slot, mark=False)
        self.stats.nvm_evictions += 1

    def _get_frame(self) -> int:
        if self.free_frames:
            return self.free_frames.pop()
        for pid in list(self.placement.lru_victims()):
            frame = self.frame_map.get(pid)
            if frame is not None and not self.frame_pins[frame]:
                self._evict_frame(frame)
                return self.free_frames.pop()
        for frame in range(self.dram_frames):
            if not self.frame_pins[frame]:
                self._evict_frame(frame)
                return self.free_frames.pop()
        raise CapacityError("all DRAM frames are pinned")

    def _evict_frame(self, frame: int) -> None:
        pid = self.frame_pid[frame]
        image = self.frames[frame]
        if self.frame_dirty[frame]:
            if self.frame_unsealed[frame]:
                core.seal_page(image)
            self.install_nvm(pid, image, dirty=True)
            self.stats.demotions += 1
        del self.frame_map[pid]
        self.placement.demoted(pid)
        self.frames[frame] = None
        self.frame_pid[frame] = NULL_PAGE
        self.frame_dirty[frame] = False
        self.frame_unsealed[frame] = 0
        self.free_frames.append(frame)
        self.stats.dram_evictions += 1

    def evict(self, tier: str, n: int) -> int:
        """Evict up to ``n`` unpinned pages from ``tier``; returns the count."""
        done = 0
        if tier == DRAM:
            for pid in list(self.placement.lru_victims()):
                if done >= n:
                    break
                frame = self.frame_map.get(pid)
                if frame is not None and not self.frame_pins[frame]:
                    self._evict_frame(frame)
                    done += 1
        elif tier == NVM:
            for slot in range(self.nvm_slots):
                if done >= n:
                    break
                if self.slot_pid[slot] != NULL_PAGE and not self.slot_pins[slot]:
                    self._evict_slot(slot)
                    done += 1
        else:
            raise ConfigError(f"unknown tier {tier!r}")
        return done

    # -- fixing --------------------------------------------------------
    def fix_page(self, pid: int, intent: str = READ) -> PageHandle:
        if not 0 <= pid < self.ssd.page_count:
            raise BoundsError(f"page {pid} outside store of {self.ssd.page_count} pages")
        if self.recovery is not None and pid not in self.recovery.repaired:
            self.recovery.ensure(pid)
        self.stats.fixes += 1
        if self.trace is not None:
            self.trace.append(pid)
        heating = self.placement.record_access(pid)
        frame = self.frame_map.get(pid)
        if frame is not None:
            self.stats.dram_hits += 1
            self.frame_pins[frame] += 1
            return PageHandle(pid, DRAM, frame, intent)
        slot = self.slot_map.get(pid)
        if slot is not None:
            self.stats.nvm_hits += 1
            if heating and self.dram_frames:
                frame = self._promote(pid, slot)
                self.frame_pins[frame] += 1
                return PageHandle(pid, DRAM, frame, intent)
            self.slot_ref[slot] = True
            self.slot_pins[slot] += 1
            return PageHandle(pid, NVM, slot, intent)
        self.stats.misses += 1
        image = self.ssd.read(pid)
        if self.dram_frames and (heating or self.placement.config.admission == DRAM):
            frame = self._place_dram(pid, image, dirty=False)
            self.frame_pins[frame] += 1
            return PageHandle(pid, DRAM, frame, intent)
        slot = self.install_nvm(pid, image, dirty=False)
        self.slot_pins[slot] += 1
        return PageHandle(pid, NVM, slot, intent)

    def _place_dram(self, pid: int, image, dirty: bool) -> int:
        frame = self._get_frame()
        self.frames[frame] = bytearray(image)
        self.frame_pid[frame] = pid
        self.frame_map[pid] = frame
        self.frame_dirty[frame] = dirty
        self.frame_unsealed[frame] = 0
        self.placement.promoted(pid)
        return frame

    def _promote(self, pid: int, slot: int) -> int:
        image = self.read_slot(slot)
        dirty = self.slot_dirty[slot]
        if self.slot_unsealed[slot]:
            core.seal_page(image)
        self._release_slot(slot)
        self.stats.promotions += 1
        return self._place_dram(pid, image, dirty)

    def unfix(self, handle: PageHandle) -> None:
        if handle.released:
            raise ProtocolError(f"handle for page {handle.page_id} already released")
        handle.released = True
        if handle.tier == DRAM:
            self.frame_pins[handle.index] -= 1
        else:
            self.slot_pins[handle.index] -= 1

    @contextlib.contextmanager
    def fixed(self, pid: int, intent: str = READ):
        handle = self.fix_page(pid, intent)
        try:
            yield handle
        finally:
            self.unfix(handle)

    def read(self, handle: PageHandle):
        """Current page image behind ``handle``."""
        if handle.released:
            raise ProtocolError("read through a released handle")
        if handle.tier == DRAM:
            return self.frames[handle.index]
        return self.read_slot(handle.index)

    # -- logged mutation -----------------------------------------------
    def _apply(self, handle: PageHandle, offset: int, after: bytes, lsn: int) -> None:
        if handle.tier == DRAM:
            f = handle.index
            self.frame_unsealed[f] = core.apply_delta(
                self.frames[f], offset, after, lsn, self.policy, self.frame_unsealed[f])
            self.frame_dirty[f] = True
            return
        slot = handle.index
        page = self.read_slot(slot)
        self.slot_unsealed[slot] = core.apply_delta(
            page, offset, after, lsn, self.policy, self.slot_unsealed[slot])
        base = self._slot_addr(slot)
        if after:
            self.nvm.write(base + offset, after)
        hdr_end = core.content_start(self.policy.fragments)
        self.nvm.write(base, page[:hdr_end])
        self.stats.nvm_page_writes += 1
        self._note_lead(lsn)
        self._persist(base, self.page_size)
        self.slot_dirty[slot] = True

    def _check_write(self, handle: PageHandle):
        if handle.released:
            raise ProtocolError("update through a released handle")
        if handle.intent != WRITE:
            raise ProtocolError(f"page {handle.page_id} not fixed for writing")

    def update_fixed(self, handle: PageHandle, offset: int, before, after, txn: int) -> int:
        """Log an UPDATE and apply it in place in the handle's tier."""
        self._check_write(handle)
        before, after = bytes(before), bytes(after)
        if len(before) != len(after):
            raise ProtocolError("before and after images differ in length")
        if offset < HEADER_SIZE or offset + len(after) > self.page_size:
            raise BoundsError(f"delta at {offset} outside page payload")
        current = self.read(handle)
        if bytes(current[offset:offset + len(before)]) != before:
            raise ProtocolError(f"before-image mismatch on page {handle.page_id} at {offset}")
        lsn = self.log.append(RecType.UPDATE, txn, handle.page_id, offset, before, after)
        self._apply(handle, offset, after, lsn)
        self.stats.updates += 1
        return lsn

    def compensate(self, handle: PageHandle, rec) -> int:
        """Undo one UPDATE record by logging and applying a CLR."""
        self._check_write(handle)
        current = self.read(handle)
        if bytes(current[rec.offset:rec.offset + len(rec.after)]) != rec.after:
            raise ProtocolError(f"undo of lsn {rec.lsn}: page {rec.page_id} no longer holds its after image")
        lsn = self.log.append(RecType.CLR, rec.txn_id, rec.page_id, rec.offset, b"",
                              rec.before, undo_next_lsn=rec.prev_txn_lsn)
        self._apply(handle, rec.offset, rec.before, lsn)
        return lsn

    def format_fixed(self, handle: PageHandle, ptype: int, txn: int) -> int:
        """Log a PAGE_FORMAT and reinitialise the page behind ``handle``."""
        self._check_write(handle)
        fresh = core.format_page(self.page_size, handle.page_id, ptype, self.policy)
        lsn = self.log.append(RecType.PAGE_FORMAT, txn, handle.page_id, 24, b"", fresh[24:])
        core.set_page_lsn(fresh, lsn)
        core.seal_page(fresh)
        if handle.tier == DRAM:
            self.frames[handle.index][:] = fresh
            self.frame_dirty[handle.index] = True
            self.frame_unsealed[handle.index] = 0
        else:
            self._write_slot_image(handle.index, fresh)
            self.slot_dirty[handle.index] = True
            self.slot_unsealed[handle.index] = 0
        return lsn

    # -- SSD write-back and cleaning -----------------------------------
    def _write_back(self, tier: str, index: int) -> None:
        if tier == DRAM:
            pid = self.frame_pid[index]
            image = self.frames[index]
            if self.frame_unsealed[index]:
                core.seal_page(image)
                self.frame_unsealed[index] = 0
        else:
            pid = self.slot_pid[index]
            image = self.read_slot(index)
            if self.slot_unsealed[index]:
                core.seal_page(image)
                end = core.content_start(self.policy.fragments)
                addr = self._slot_addr(index)
                self.nvm.write(addr, image[:end])
                self._persist(addr, end)
                self.slot_unsealed[index] = 0
        lsn = core.page_lsn(image)
        if lsn > self.log.durable_lsn:
            self.log.flush(lsn)
        self.ssd.write(pid, image)
        self.stats.ssd_writebacks += 1
        if tier == DRAM:
            self.frame_dirty[index] = False
        else:
            self.slot_dirty[index] = False

    def write_to_ssd(self, pid: int) -> bool:
        """Write a resident dirty page to SSD; returns False when clean."""
        frame = self.frame_map.get(pid)
        if frame is not None:
            if not self.frame_dirty[frame]:
                return False
            self._write_back(DRAM, frame)
            return True
        slot = self.slot_map.get(pid)
        if slot is None:
            raise ProtocolError(f"page {pid} is not resident")
        if pid in self.suspect:
            raise ProtocolError(f"page {pid} has not been verified since the crash")
        if not self.slot_dirty[slot]:
            return False
        self._write_back(NVM, slot)
        return True

    def cleaner_step(self, budget: int) -> int:
        """Round-robin over DRAM frames then NVM slots, cleaning up to ``budget`` pages."""
        total = self.dram_frames + self.nvm_slots
        cleaned = 0
        for _ in range(total):
            if cleaned >= budget:
                break
            pos = self._cleaner_cursor
            self._cleaner_cursor = (pos + 1) % total
            if pos < self.dram_frames:
                if self.frame_dirty[pos] and not self.frame_pins[pos]:
                    self._write_back(DRAM, pos)
                    cleaned += 1
            else:
                slot = pos - self.dram_frames
                if (self.slot_dirty[slot] and not self.slot_pins[slot]
                        and self.slot_pid[slot] not in self.suspect):
                    self._write_back(NVM, slot)
                    cleaned += 1
        return cleaned

    def flush_all(self) -> int:
        n = 0
        for pid in list(self.frame_map) + list(self.slot_map):
            if pid not in self.suspect and self.write_to_ssd(pid):
                n += 1
        return n

    # -- introspection -------------------------------------------------
    def tier_of(self, pid: int) -> str | None:
        if pid in self.frame_map:
            return DRAM
        if pid in self.slot_map:
            return NVM
        return None

    def resident_pages(self) -> list[int]:
        return sorted(set(self.frame_map) | set(self.slot_map))

    def is_dirty(self, pid: int) -> bool:
        if pid in self.frame_map:
            return self.frame_dirty[self.frame_map[pid]]
        if pid in self.slot_map:
            return self.slot_dirty[self.slot_map[pid]]
        return False

    def scan_nvm(self) -> int:
        """Rebuild residency from NVM slot headers after a crash.

        Every slot naming a valid page becomes a repair candidate. Returns the
        largest pageLSN found in any slot header.
        """
        max_lsn = 0
        self.nvm_candidates = {}
        for slot in range(self.nvm_slots):
            hdr = self.nvm.read(self._slot_addr(slot), HEADER_SIZE)
            pid = core.page_id(hdr)
            max_lsn = max(max_lsn, core.page_lsn(hdr))
            if pid < self.ssd.page_count and core.page_type(hdr) != PAGE_FREE:
                self.nvm_candidates.setdefault(pid, []).append(slot)
                self.free_slots.remove(slot)
                self.slot_pid[slot] = pid
        self.suspect = set(self.nvm_candidates)
        return max_lsn

    def hit_ratios(self) -> tuple[float, float]:
        n = self.stats.fixes or 1
        return self.stats.dram_hits / n, self.stats.nvm_hits / n


# functional aliases
def fix_page(pool: BufferPool, pid: int, intent: str = READ) -> PageHandle:
    return pool.fix_page(pid, intent)


def update_fixed(pool: BufferPool, handle: PageHandle, offset: int, before, after, txn: int) -> int:
    return pool.update_fixed(handle, offset, before, after, txn)


def evict(pool: BufferPool, tier: str, n: int) -> int:
    return pool.evict(tier, n)


def write_to_ssd(pool: BufferPool, pid: int) -> bool:
    return pool.write_to_ssd(pid)


def cleaner_step(pool: BufferPool, budget: int) -> int:
    return pool.cleaner_step(budget)
