"""Crash-injection harness and command-line entry point.

A trial runs a seeded transactional workload against the engine while the
simulated CPU cache writes lines back at random, crashes at a chosen op,
restarts, and compares a full tree scan with an oracle map that only ever
sees committed transactions.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import math
import random
import re
import sys
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import core
from .btree import BTree
from .bufferpool import NVM, BufferPool, PlacementConfig, SsdStore
from .checksum import BACKEND
from .core import ChecksumPolicy
from .engine import CrashState, Engine, EngineConfig
from .errors import ConfigError, OptipoolError
from .recovery import PageState, classify_page, replay
from .simpmem import SimPmem
from .wal import LogDevice, RecType

CRASH_MODES = ("random-point", "after-quiesce", "none")
RESTART_MODES = ("eager", "on_demand")
CONSISTENCY_MODES = ("optimistic", "pessimistic")
_DELETED = object()
_US = re.compile(r" us=\d+")


@dataclass
class TrialConfig:
    seed: int = 0
    page_size: int = 4096
    cache_capacity_lines: int = 512
    dram_frames: int = 64
    nvm_slots: int = 512
    ssd_pages: int = 4096
    checksum_policy: str = "every-update"
    promotion_threshold: int = 2
    promotion_window: int = 32
    admission: str = NVM
    cleaner_budget: int = 4
    cleaner_period: float = 0  # ops between cleaner steps; 0 or inf disables
    evict_per_step: int = 4
    insert_weight: int = 5
    delete_weight: int = 2
    lookup_weight: int = 3
    ops_per_txn: int = 6
    abort_rate: float = 0.1
    ops: int = 120
    crash_at: int = 0  # 0 = pick at random (random-point mode)
    crash_mode: str = "random-point"
    restart_mode: str = "on_demand"
    consistency: str = "optimistic"
    key_space: int = 4000
    preload_keys: int = 3000
    value_min: int = 32
    value_max: int = 160

    def validate(self):
        if self.crash_mode not in CRASH_MODES:
            raise ConfigError(f"crash mode must be one of {CRASH_MODES}")
        if self.restart_mode not in RESTART_MODES:
            raise ConfigError(f"restart mode must be one of {RESTART_MODES}")
        if self.consistency not in CONSISTENCY_MODES:
            raise ConfigError(f"consistency must be one of {CONSISTENCY_MODES}")
        if min(self.insert_weight, self.delete_weight, self.lookup_weight) < 0 or \
                self.insert_weight + self.delete_weight + self.lookup_weight <= 0:
            raise ConfigError("op weights must be non-negative with a positive total")
        if self.ops < 1 or self.ops_per_txn < 1 or self.key_space < 1:
            raise ConfigError("ops, ops per txn and key space must be positive")
        if not 0 <= self.abort_rate <= 1:
            raise ConfigError("abort rate must lie in [0, 1]")
        if self.cleaner_budget < 0 or self.cleaner_period < 0 or self.evict_per_step < 0:
            raise ConfigError("cleaner and eviction settings cannot be negative")
        if not 0 <= self.value_min <= self.value_max:
            raise ConfigError("value size range is empty")
        if self.preload_keys > self.key_space:
            raise ConfigError("cannot preload more keys than the key space holds")
        if self.crash_at < 0 or self.crash_at > self.ops:
            raise ConfigError("crash_at must lie in [0, ops]")
        self.engine_config().validate()

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            page_size=self.page_size, dram_frames=self.dram_frames, nvm_slots=self.nvm_slots,
            ssd_pages=self.ssd_pages, cache_capacity_lines=self.cache_capacity_lines,
            seed=self.seed, checksum_policy=ChecksumPolicy.parse(self.checksum_policy),
            placement=PlacementConfig(self.promotion_threshold, self.promotion_window,
                                      self.admission),
            optimistic=self.consistency == "optimistic",
            max_value=max(256, self.value_max))

    @property
    def cleaner_enabled(self) -> bool:
        return 0 < self.cleaner_period < math.inf and self.cleaner_budget > 0


class OracleState:
    """Committed key/value map, updated only when a commit is acknowledged."""

    def __init__(self, committed=None):
        self.committed: dict[bytes, bytes] = dict(committed or {})
        self.pending: dict[bytes, object] = {}

    def view(self, key: bytes):
        v = self.pending.get(key, self.committed.get(key))
        return None if v is _DELETED else v

    def put(self, key, value):
        self.pending[key] = value

    def remove(self, key):
        self.pending[key] = _DELETED

    def commit(self):
        for k, v in self.pending.items():
            if v is _DELETED:
                self.committed.pop(k, None)
            else:
                self.committed[k] = v
        self.pending = {}

    def discard(self):
        self.pending = {}

    def items(self):
        return sorted(self.committed.items())


@dataclass
class TrialReport:
    seed: int
    verdict: str = "pass"
    error: str = ""
    crash_at: int = 0
    ops_executed: int = 0
    committed_txns: int = 0
    aborted_txns: int = 0
    losers: int = 0
    corrupted: int = 0
    behind: int = 0
    current: int = 0
    ahead: int = 0
    records_replayed: int = 0
    pages_repaired: int = 0
    ssd_fetches_for_repair: int = 0
    dram_hit_ratio: float = 0.0
    nvm_hit_ratio: float = 0.0
    evictions: int = 0
    explicit_flushes: int = 0
    fences: int = 0
    nvm_page_writes: int = 0
    ssd_writes: int = 0
    wal_violations: int = 0
    nvm_wal_lead_writes: int = 0
    recovery_work_units: int = 0
    recovery_microseconds: int = 0
    restart_events: list = field(default_factory=list, repr=False)

    TIMING_FIELDS = ("recovery_microseconds",)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def pages_by_state(self) -> dict[str, int]:
        return {s.value: getattr(self, s.value.lower()) for s in PageState}

    def as_dict(self, timing: bool = True) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "restart_events"}
        if not timing:
            for name in self.TIMING_FIELDS:
                out.pop(name)
        return out

    def to_records(self, timing: bool = True) -> str:
        """Line-delimited ``key=value`` records."""
        lines = [f"{k}={_fmt(v)}" for k, v in self.as_dict(timing).items()]
        events = self.restart_events if timing else [_US.sub("", ev) for ev in self.restart_events]
        lines += [f"restart {ev}" for ev in events]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v).replace("\n", " ")


# -- preloaded stores ------------------------------------------------------
def _key(i: int) -> bytes:
    return b"key%07d" % i


@functools.lru_cache(maxsize=8)
def _preload(page_size, ssd_pages, policy_text, preload_keys, key_space, vmin, vmax):
    rng = random.Random(0xC0FFEE ^ key_space)
    keys = sorted(rng.sample(range(key_space), preload_keys))
    items = [(_key(k), rng.randbytes(rng.randint(vmin, vmax))) for k in keys]
    ssd = SsdStore(ssd_pages, page_size)
    policy = ChecksumPolicy.parse(policy_text)
    if items:
        BTree.bulk_load(ssd, policy, items)
    else:
        BTree.format_store(ssd, policy)
    return bytes(ssd.data), tuple(items)


def build_store(cfg: TrialConfig) -> tuple[SsdStore, dict]:
    """Formatted (optionally preloaded) SSD store plus its initial contents."""
    data, items = _preload(cfg.page_size, cfg.ssd_pages, cfg.checksum_policy,
                           cfg.preload_keys, cfg.key_space, cfg.value_min, cfg.value_max)
    return SsdStore(cfg.ssd_pages, cfg.page_size, data), dict(items)


# -- trials ----------------------------------------------------------------
class Workload:
    def __init__(self, cfg: TrialConfig, engine: Engine, oracle: OracleState):
        self.cfg, self.engine, self.oracle = cfg, engine, oracle
        self.rng = random.Random(cfg.seed * 7919 + 17)
        self.txn = None
        self.left = 0
        self.committed = self.aborted = 0
        self.divergence = ""
        w = cfg
        self.kinds = ["insert", "delete", "lookup"]
        self.weights = [w.insert_weight, w.delete_weight, w.lookup_weight]

    def step(self, i: int) -> None:
        eng, rng, cfg = self.engine, self.rng, self.cfg
        if self.txn is None:
            self.txn = eng.begin()
            self.left = cfg.ops_per_txn
        kind = rng.choices(self.kinds, self.weights)[0]
        key = _key(rng.randrange(cfg.key_space))
        if kind == "insert":
            value = rng.randbytes(rng.randint(cfg.value_min, cfg.value_max))
            eng.insert(self.txn, key, value)
            self.oracle.put(key, value)
        elif kind == "delete":
            existed = eng.delete(self.txn, key)
            if existed != (self.oracle.view(key) is not None):
                self.divergence = self.divergence or f"op {i}: delete({key!r}) returned {existed}"
            self.oracle.remove(key)
        else:
            got = eng.lookup(key)
            if got != self.oracle.view(key):
                self.divergence = self.divergence or f"op {i}: lookup({key!r}) disagrees with oracle"
        self.left -= 1
        if self.left == 0:
            self.finish(abort_allowed=True)
        if cfg.evict_per_step:
            eng.nvm.evict_random(cfg.evict_per_step)
        if cfg.cleaner_enabled and (i + 1) % int(cfg.cleaner_period) == 0:
            eng.pool.cleaner_step(cfg.cleaner_budget)

    def finish(self, abort_allowed: bool) -> None:
        if self.txn is None:
            return
        if abort_allowed and self.rng.random() < self.cfg.abort_rate:
            self.engine.abort(self.txn)
            self.oracle.discard()
            self.aborted += 1
        else:
            self.engine.commit(self.txn)
            self.oracle.commit()
            self.committed += 1
        self.txn = None


def _pick_crash(cfg: TrialConfig) -> int:
    if cfg.crash_mode != "random-point":
        return cfg.ops
    if cfg.crash_at:
        return cfg.crash_at
    return random.Random(cfg.seed * 104729 + 3).randint(1, cfg.ops)


def run_trial(cfg: TrialConfig, dump_dir=None) -> TrialReport:
    """One seeded workload / crash / restart / verify cycle."""
    cfg.validate()
    ecfg = cfg.engine_config()
    ssd, initial = build_store(cfg)
    nvm = SimPmem(cfg.nvm_slots * cfg.page_size, cfg.cache_capacity_lines, cfg.seed)
    eng = Engine(ecfg, ssd, nvm, LogDevice())
    oracle = OracleState(initial)
    wl = Workload(cfg, eng, oracle)
    crash_at = _pick_crash(cfg)
    rep = TrialReport(seed=cfg.seed, crash_at=crash_at if cfg.crash_mode != "none" else 0)
    try:
        for i in range(crash_at):
            wl.step(i)
            rep.ops_executed += 1
        if cfg.crash_mode != "random-point":
            wl.finish(abort_allowed=False)
            eng.quiesce()
    except OptipoolError as exc:
        wl.divergence = wl.divergence or f"engine error before crash: {exc!r}"
    rep.committed_txns, rep.aborted_txns = wl.committed, wl.aborted
    rep.dram_hit_ratio, rep.nvm_hit_ratio = eng.pool.hit_ratios()
    pre = eng.counters()
    if cfg.crash_mode == "none" or wl.divergence:
        final, post = eng, {}
    else:
        state = eng.crash()
        if dump_dir is not None:
            save_crash(dump_dir, cfg, state, oracle)
        final, post = None, {}
        try:
            final = Engine.recover(ecfg, state, cfg.restart_mode)
        except OptipoolError as exc:
            wl.divergence = f"restart failed: {exc!r}"
    if final is not None and not wl.divergence:
        _verify(final, oracle, rep, wl)
        if final is not eng:
            post = final.counters()
            _absorb_restart(final, rep)
    if wl.divergence:
        rep.verdict, rep.error = "fail", wl.divergence
    for name in ("evictions", "explicit_flushes", "fences", "nvm_page_writes", "ssd_writes",
                 "nvm_wal_lead_writes"):
        setattr(rep, name, pre.get(name, 0) + post.get(name, 0))
    rep.wal_violations = (post or pre).get("wal_violations", 0)
    return rep


def _verify(engine: Engine, oracle: OracleState, rep: TrialReport, wl: Workload) -> None:
    try:
        got = engine.tree.check()
    except OptipoolError as exc:
        wl.divergence = f"verification scan failed: {exc!r}"
        return
    want = oracle.items()
    if got != want:
        gk, wk = dict(got), dict(want)
        diff = sorted(set(gk.items()) ^ set(wk.items()))
        wl.divergence = f"tree differs from oracle on {len(diff)} entries, first {diff[0][0]!r}"


def _absorb_restart(engine: Engine, rep: TrialReport) -> None:
    ctx = engine.restart_ctx
    c = ctx.counters
    for state in PageState:
        setattr(rep, state.value.lower(), c.pages_by_state.get(state, 0))
    rep.losers = len(ctx.analysis.losers)
    rep.records_replayed = c.records_replayed
    rep.pages_repaired = c.pages_repaired
    rep.ssd_fetches_for_repair = c.ssd_fetches_for_repair
    rep.recovery_work_units = c.records_replayed + c.ssd_fetches_for_repair
    rep.recovery_microseconds = c.recovery_microseconds
    rep.restart_events = ctx.report_lines()


def save_crash(directory, cfg: TrialConfig, state: CrashState, oracle: OracleState) -> None:
    """Persist crash images, the config and the oracle for a cross-process restart."""
    d = Path(directory)
    state.save(d)
    (d / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=1))
    (d / "oracle.json").write_text(json.dumps({k.hex(): v.hex() for k, v in oracle.committed.items()}))


def resume_trial(directory, restart_mode: str | None = None) -> TrialReport:
    """Restart from a directory written by :func:`save_crash` and verify it."""
    d = Path(directory)
    raw = json.loads((d / "config.json").read_text())
    cfg = TrialConfig(**raw)
    if restart_mode:
        cfg = dataclasses.replace(cfg, restart_mode=restart_mode)
    cfg.validate()
    oracle = OracleState({bytes.fromhex(k): bytes.fromhex(v)
                          for k, v in json.loads((d / "oracle.json").read_text()).items()})
    state = CrashState.load(d, cfg.page_size)
    rep = TrialReport(seed=cfg.seed)
    wl = Workload(cfg, None, oracle)
    try:
        eng = Engine.recover(cfg.engine_config(), state, cfg.restart_mode)
    except OptipoolError as exc:
        rep.verdict, rep.error = "fail", f"restart failed: {exc!r}"
        return rep
    _verify(eng, oracle, rep, wl)
    _absorb_restart(eng, rep)
    c = eng.counters()
    for name in ("evictions", "explicit_flushes", "fences", "nvm_page_writes", "ssd_writes",
                 "wal_violations", "nvm_wal_lead_writes"):
        setattr(rep, name, c.get(name, 0))
    if wl.divergence:
        rep.verdict, rep.error = "fail", wl.divergence
    return rep


# -- suites ----------------------------------------------------------------
class SuiteDivergence(OptipoolError):
    def __init__(self, seed: int, op_index: int, point: dict, report: TrialReport):
        super().__init__(f"oracle divergence: seed={seed} op_index={op_index} point={point}: "
                         f"{report.error}")
        self.seed, self.op_index, self.point, self.report = seed, op_index, point, report


def minimize(cfg: TrialConfig) -> int:
    """Smallest crash op index at which ``cfg``'s seed fails (its own crash point if none)."""
    limit = _pick_crash(cfg)
    if cfg.crash_mode != "random-point":
        return limit
    for at in range(1, limit + 1):
        if not run_trial(dataclasses.replace(cfg, crash_at=at)).passed:
            return at
    return limit


@dataclass
class PointSummary:
    point: dict
    trials: int = 0
    passes: int = 0
    records_replayed: int = 0
    pages_repaired: int = 0
    ssd_fetches_for_repair: int = 0
    recovery_us: int = 0
    dram_hit: float = 0.0
    nvm_hit: float = 0.0
    explicit_flushes: int = 0
    fences: int = 0
    nvm_page_writes: int = 0
    wal_violations: int = 0
    nvm_wal_lead_writes: int = 0
    states: Counter = field(default_factory=Counter)

    def add(self, rep: TrialReport):
        self.trials += 1
        self.passes += rep.passed
        for name in ("records_replayed", "pages_repaired", "ssd_fetches_for_repair",
                     "explicit_flushes", "fences", "nvm_page_writes", "wal_violations",
                     "nvm_wal_lead_writes"):
            setattr(self, name, getattr(self, name) + getattr(rep, name))
        self.recovery_us += rep.recovery_microseconds
        self.dram_hit += rep.dram_hit_ratio
        self.nvm_hit += rep.nvm_hit_ratio
        self.states.update(rep.pages_by_state())

    @property
    def pass_rate(self) -> float:
        return self.passes / self.trials if self.trials else 0.0

    @property
    def replayed_per_repaired_page(self) -> float:
        return self.records_replayed / self.pages_repaired if self.pages_repaired else 0.0

    def row(self) -> dict:
        n = self.trials or 1
        out = dict(self.point)
        out.update(trials=self.trials, pass_rate=self.pass_rate,
                   mean_recovery_us=self.recovery_us / n,
                   mean_records_replayed_per_repaired_page=self.replayed_per_repaired_page,
                   mean_ssd_fetches=self.ssd_fetches_for_repair / n,
                   mean_dram_hit_ratio=self.dram_hit / n, mean_nvm_hit_ratio=self.nvm_hit / n,
                   explicit_flushes=self.explicit_flushes, fences=self.fences,
                   wal_violations=self.wal_violations)
        out.update({s.value: self.states.get(s.value, 0) for s in PageState})
        return out


def _run_one(cfg: TrialConfig) -> TrialReport:
    return run_trial(cfg)


def sweep_points(axes: dict[str, list]) -> list[dict]:
    points = [{}]
    for name, values in axes.items():
        points = [{**p, name: v} for p in points for v in values]
    return points


def run_suite(base: TrialConfig, trials: int, axes: dict[str, list] | None = None,
              jobs: int = 1, abort_on_divergence: bool = True, progress=None) -> list[PointSummary]:
    """``trials`` seeds (base.seed, base.seed+1, ...) at every sweep point."""
    out = []
    for point in sweep_points(axes or {}):
        configs = [dataclasses.replace(base, seed=base.seed + i, **point) for i in range(trials)]
        for c in configs:
            c.validate()
        summary = PointSummary(point)
        if jobs > 1:
            import multiprocessing

            with multiprocessing.Pool(jobs) as mp:
                reports = mp.map(_run_one, configs, chunksize=max(1, trials // (4 * jobs)))
        else:
            reports = map(_run_one, configs)
        for c, rep in zip(configs, reports):
            summary.add(rep)
            if progress:
                progress(point, rep)
            if not rep.passed and abort_on_divergence:
                raise SuiteDivergence(c.seed, minimize(c), point, rep)
        out.append(summary)
    return out


def format_table(summaries: list[PointSummary], sep: str = "\t") -> str:
    rows = [s.row() for s in summaries]
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [sep.join(cols)]
    for r in rows:
        lines.append(sep.join(_fmt(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def record_access_trace(cfg: TrialConfig) -> list[int]:
    """Page-fix sequence of ``cfg``'s workload run without a crash."""
    cfg = dataclasses.replace(cfg, crash_mode="none")
    ssd, initial = build_store(cfg)
    nvm = SimPmem(cfg.nvm_slots * cfg.page_size, cfg.cache_capacity_lines, cfg.seed)
    eng = Engine(cfg.engine_config(), ssd, nvm, LogDevice())
    eng.pool.trace = []
    wl = Workload(cfg, eng, OracleState(initial))
    for i in range(cfg.ops):
        wl.step(i)
    return eng.pool.trace


def replay_hit_ratio(cfg: TrialConfig, trace: list[int], dram_frames: int) -> float:
    """DRAM hit ratio of ``trace`` replayed (fix/unfix only) with ``dram_frames`` frames."""
    ssd, _ = build_store(cfg)
    nvm = SimPmem(cfg.nvm_slots * cfg.page_size, cfg.cache_capacity_lines, cfg.seed)
    ecfg = cfg.engine_config()
    pool = BufferPool(ssd, LogDevice(), nvm, dram_frames, cfg.nvm_slots,
                      ecfg.checksum_policy, ecfg.placement, ecfg.optimistic)
    for pid in trace:
        pool.unfix(pool.fix_page(pid))
    return pool.hit_ratios()[0]


# -- exhaustive crash-image enumeration -------------------------------------
@dataclass
class EnumerationResult:
    histories: int = 0
    images: int = 0
    mismatches: int = 0
    unsound_current: int = 0
    consistent_images: int = 0
    states: Counter = field(default_factory=Counter)
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.mismatches == 0 and self.unsound_current == 0


ENUM_POLICIES = ("every-update", "every-k:2", "every-k:3", "per-fragment:2", "per-fragment:4")


def run_oracle_enumeration(histories: int = 100, page_size: int = 256, seed: int = 0,
                           policies=ENUM_POLICIES) -> EnumerationResult:
    """Classify every crash image of scripted single-page histories.

    Ground truth does not consult checksums: an image is consistent iff it is
    byte-identical to a version the history sealed, and its expected state
    then follows from that version's pageLSN.
    """
    if page_size > 256:
        raise ConfigError("enumeration runs on pages of at most 256 bytes")
    res = EnumerationResult()
    for h in range(histories):
        rng = random.Random(seed * 1_000_003 + h)
        policy = ChecksumPolicy.parse(policies[h % len(policies)])
        _enumerate_history(rng, policy, page_size, res, h)
        res.histories += 1
    return res


def _enumerate_history(rng, policy, page_size, res, h):
    pid = 3
    dev = SimPmem(page_size, cache_capacity_lines=64, seed=h)
    log = LogDevice()
    page = core.format_page(page_size, pid, core.PAGE_LEAF, policy)
    lsn = log.append(RecType.PAGE_FORMAT, 1, pid, 24, b"", page[24:])
    core.set_page_lsn(page, lsn)
    core.seal_page(page)
    sealed = {bytes(page): lsn}
    dev.write(0, page)
    lo = core.content_start(policy.fragments)
    counter = 0

    def update():
        nonlocal counter
        n = rng.randint(1, 24)
        off = rng.randrange(lo, page_size - n + 1)
        after = rng.randbytes(n)
        rec = log.append(RecType.UPDATE, 1, pid, off, bytes(page[off:off + n]), after)
        counter = core.apply_delta(page, off, after, rec, policy, counter)
        dev.write(off, after)
        dev.write(0, page[:core.content_start(policy.fragments)])
        if counter == 0:
            sealed[bytes(page)] = rec

    for _ in range(rng.randint(0, 4)):
        update()
    dev.evict_random(dev.capacity)  # the persisted base version
    for _ in range(rng.randint(1, 3)):
        update()
    lsns = [r.lsn for r in log.records()]
    log.flush(rng.choice(lsns))
    expected = max(r.lsn for r in log.records(durable_only=True) if r.page_id == pid)
    for img in dev.enumerate_crash_images(0, page_size):
        image = img.data
        got = classify_page(image, policy, expected)
        version = sealed.get(image)
        if version is None:
            truth = PageState.CORRUPTED
        else:
            res.consistent_images += 1
            truth = (PageState.BEHIND if version < expected else
                     PageState.CURRENT if version == expected else PageState.AHEAD)
        res.images += 1
        res.states[got.value] += 1
        if got is not truth:
            res.mismatches += 1
            res.details.append((h, str(policy), truth.value, got.value))
        if got is PageState.CURRENT:
            fresh = bytearray(page_size)
            replay(fresh, log.page_chain(pid, core.NULL_LSN, expected))
            if bytes(fresh) != image:
                res.unsound_current += 1


# -- command line ----------------------------------------------------------
def _field_type(f):
    if f.type in ("int", int):
        return int
    if f.type in ("float", float):
        return float
    return str


def _add_trial_args(p: argparse.ArgumentParser):
    for f in fields(TrialConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_field_type(f),
                       default=f.default)
    p.add_argument("--report-path", help="write line-delimited key=value records here")


def _config_from(args) -> TrialConfig:
    cfg = TrialConfig(**{f.name: getattr(args, f.name) for f in fields(TrialConfig)})
    cfg.validate()
    return cfg


def _parse_axis(text: str) -> tuple[str, list]:
    name, _, values = text.partition("=")
    name = name.strip().replace("-", "_")
    ftypes = {f.name: _field_type(f) for f in fields(TrialConfig)}
    if name not in ftypes or not values:
        raise ConfigError(f"bad sweep axis {text!r}")
    conv = ftypes[name]
    return name, [conv(v) for v in values.split(",")]


def _write(path, text: str):
    if path:
        Path(path).write_text(text)


def _cmd_run_trial(args) -> int:
    if args.resume_from:
        rep = resume_trial(args.resume_from, args.restart_mode_override)
    else:
        rep = run_trial(_config_from(args), dump_dir=args.dump_dir)
    text = rep.to_records()
    _write(args.report_path, text)
    sys.stdout.write(text)
    return 0 if rep.passed else 1


def _cmd_run_suite(args) -> int:
    base = _config_from(args)
    axes = dict(_parse_axis(a) for a in args.sweep or [])
    try:
        summaries = run_suite(base, args.trials, axes, jobs=args.jobs,
                              abort_on_divergence=not args.keep_going)
    except SuiteDivergence as exc:
        msg = f"verdict=fail\nrepro_seed={exc.seed}\nrepro_op_index={exc.op_index}\nerror={exc.report.error}\n"
        _write(args.report_path, msg)
        sys.stdout.write(msg)
        return 1
    table = format_table(summaries)
    _write(args.table_path, table)
    sys.stdout.write(table)
    ok = all(s.passes == s.trials for s in summaries)
    records = "".join(f"{k}={_fmt(v)}\n" for s in summaries for k, v in s.row().items())
    _write(args.report_path, records + f"verdict={'pass' if ok else 'fail'}\n")
    return 0 if ok else 1


def _cmd_oracle_enum(args) -> int:
    res = run_oracle_enumeration(args.histories, args.page_size, args.seed)
    lines = [f"histories={res.histories}", f"images={res.images}",
             f"consistent_images={res.consistent_images}", f"mismatches={res.mismatches}",
             f"unsound_current={res.unsound_current}"]
    lines += [f"state_{k}={v}" for k, v in sorted(res.states.items())]
    lines += [f"mismatch history={d[0]} policy={d[1]} truth={d[2]} got={d[3]}" for d in res.details]
    lines.append(f"verdict={'pass' if res.passed else 'fail'}")
    text = "\n".join(lines) + "\n"
    _write(args.report_path, text)
    sys.stdout.write(text)
    return 0 if res.passed else 1


def _cmd_format_store(args) -> int:
    policy = ChecksumPolicy.parse(args.checksum_policy)
    EngineConfig(page_size=args.page_size, ssd_pages=args.ssd_pages,
                 checksum_policy=policy).validate()
    if args.preload_keys:
        data, _ = _preload(args.page_size, args.ssd_pages, args.checksum_policy,
                           args.preload_keys, args.key_space, args.value_min, args.value_max)
        ssd = SsdStore(args.ssd_pages, args.page_size, data)
    else:
        ssd = SsdStore(args.ssd_pages, args.page_size)
        BTree.format_store(ssd, policy)
    ssd.dump(args.store_path)
    sys.stdout.write(f"store={args.store_path}\npages={args.ssd_pages}\npage_size={args.page_size}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optipool", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"optipool 0.1.0 ({BACKEND} crc)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-trial", help="one crash/restart trial")
    _add_trial_args(p)
    p.add_argument("--dump-dir", help="persist crash images, config and oracle here")
    p.add_argument("--resume-from", help="restart and verify from a --dump-dir directory")
    p.add_argument("--restart-mode-override", choices=RESTART_MODES)
    p.set_defaults(func=_cmd_run_trial)

    p = sub.add_parser("run-suite", help="seeded trials over a sweep, emits a table")
    _add_trial_args(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--sweep", action="append", metavar="FIELD=V1,V2,...")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--table-path")
    p.add_argument("--keep-going", action="store_true", help="do not abort on the first failure")
    p.set_defaults(func=_cmd_run_suite)

    p = sub.add_parser("oracle-enum", help="exhaustive crash-image classification check")
    p.add_argument("--histories", type=int, default=100)
    p.add_argument("--page-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-path")
    p.set_defaults(func=_cmd_oracle_enum)

    p = sub.add_parser("format-store", help="write a formatted SSD store file")
    p.add_argument("--store-path", required=True)
    p.add_argument("--ssd-pages", type=int, default=4096)
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--checksum-policy", default="every-update")
    p.add_argument("--preload-keys", type=int, default=0)
    p.add_argument("--key-space", type=int, default=4000)
    p.add_argument("--value-min", type=int, default=32)
    p.add_argument("--value-max", type=int, default=160)
    p.set_defaults(func=_cmd_format_store)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
