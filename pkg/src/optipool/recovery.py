"""Post-crash corruption detection and single-page repair.

Classification compares an NVM-resident image against the log: a checksum
mismatch means the image is torn; otherwise its pageLSN is compared with the
page's expected LSN (the last durable record for the page).
"""

from __future__ import annotations

import enum
import time
from collections import Counter
from dataclasses import dataclass, field

from . import core
from .core import NULL_LSN, ChecksumPolicy
from .errors import ConfigError, LogIntegrityError, ProtocolError
from .wal import AnalysisResult, LogDevice, RecType


class PageState(enum.Enum):
    CORRUPTED = "Corrupted"
    BEHIND = "Behind"
    CURRENT = "Current"
    AHEAD = "Ahead"


# preference when several NVM slots claim the same page
_RANK = {PageState.CURRENT: 0, PageState.BEHIND: 1, PageState.AHEAD: 2, PageState.CORRUPTED: 3}


def classify_page(image, policy: ChecksumPolicy | None, expected: int) -> PageState:
    if not core.verify_page(image, policy):
        return PageState.CORRUPTED
    lsn = core.page_lsn(image)
    if lsn < expected:
        return PageState.BEHIND
    if lsn == expected:
        return PageState.CURRENT
    return PageState.AHEAD


def redo(page: bytearray, rec) -> None:
    """Apply one page record's redo image without resealing."""
    if rec.type == RecType.PAGE_FORMAT:
        page[0:8] = rec.page_id.to_bytes(8, "little")
        page[rec.offset:rec.offset + len(rec.after)] = rec.after
    elif rec.type in (RecType.UPDATE, RecType.CLR):
        page[rec.offset:rec.offset + len(rec.after)] = rec.after
    else:
        raise LogIntegrityError(f"record {rec.lsn} ({rec.type.name}) is not a page record")
    core.set_page_lsn(page, rec.lsn)


def replay(page: bytearray, records) -> int:
    """Roll ``page`` forward through ``records`` and seal it; returns the count."""
    n = 0
    for rec in records:
        redo(page, rec)
        n += 1
    if n:
        core.seal_page(page)
    return n


@dataclass
class RestartCounters:
    ssd_fetches_for_repair: int = 0
    records_replayed: int = 0
    pages_repaired: int = 0
    pages_by_state: Counter = field(default_factory=Counter)
    recovery_ns: int = 0

    @property
    def recovery_microseconds(self) -> int:
        return self.recovery_ns // 1000


@dataclass
class PageEvent:
    page_id: int
    state: PageState
    source: str
    replayed: int
    ssd_fetch: bool
    micros: int

    def line(self) -> str:
        return (f"page={self.page_id} state={self.state.value} source={self.source} "
                f"replayed={self.replayed} ssd_fetch={int(self.ssd_fetch)} us={self.micros}")


class RestartContext:
    """Restart bookkeeping; installed as the pool's on-first-fix repair hook."""

    def __init__(self, pool, log: LogDevice, analysis: AnalysisResult, mode: str = "on_demand"):
        self.pool = pool
        self.log = log
        self.analysis = analysis
        self.mode = mode
        self.repaired: set[int] = set()
        self.undo_done = False
        self.counters = RestartCounters()
        self.events: list[PageEvent] = []

    def expected_for(self, pid: int) -> int:
        """Expected LSN; pages absent from the durable log expect their SSD image."""
        exp = self.analysis.expected_lsn.get(pid)
        if exp is None:
            return self.pool.ssd.peek_lsn(pid)
        return exp

    def _on_chain(self, pid: int, lsn: int) -> bool:
        if lsn == NULL_LSN:
            return True
        try:
            rec = self.log.get(lsn)
        except LogIntegrityError:
            return False
        return rec.page_id == pid and rec.type in (RecType.UPDATE, RecType.CLR, RecType.PAGE_FORMAT)

    def ensure(self, pid: int) -> None:
        """Classify and, if needed, repair ``pid`` before its first use."""
        if pid in self.repaired:
            return
        t0 = time.perf_counter_ns()
        pool = self.pool
        expected = self.expected_for(pid)
        slots = pool.nvm_candidates.pop(pid, [])
        best = None
        for slot in slots:
            image = pool.read_slot(slot)
            state = classify_page(image, pool.policy, expected)
            if state is PageState.BEHIND and not self._on_chain(pid, core.page_lsn(image)):
                # sealed image from a history branch lost in an earlier crash
                state = PageState.AHEAD
            if best is None or _RANK[state] < _RANK[best[0]]:
                best = (state, slot, image)
        for slot in slots:
            if best is None or slot != best[1]:
                pool.discard_slot(slot)
        pool.suspect.discard(pid)
        ssd_lsn = pool.ssd.peek_lsn(pid)
        if ssd_lsn > expected:
            raise ProtocolError(f"SSD image of page {pid} at {ssd_lsn} is newer than expected {expected}")

        replayed, fetched = 0, False
        if best is None:
            source = "ssd"
            if ssd_lsn == expected:
                state = PageState.CURRENT
            else:
                state = PageState.BEHIND
                page = pool.ssd.read(pid)
                replayed = replay(page, self.log.page_chain(pid, ssd_lsn, expected))
                self._install(pid, page, None, dirty=True)
        else:
            state, slot, image = best
            source = "nvm"
            if state is PageState.CURRENT:
                pool.adopt_slot(slot, pid, dirty=core.page_lsn(image) != ssd_lsn)
            else:
                fetched = state is not PageState.BEHIND
                page, replayed = repair_page(self, pid, state, image)
                self._install(pid, page, slot, dirty=True)
        self.repaired.add(pid)
        self.counters.pages_by_state[state] += 1
        self.counters.records_replayed += replayed
        if replayed or fetched:
            self.counters.pages_repaired += 1
        dt = time.perf_counter_ns() - t0
        self.counters.recovery_ns += dt
        self.events.append(PageEvent(pid, state, source, replayed, fetched, dt // 1000))

    def _install(self, pid: int, page, slot, dirty: bool) -> None:
        self.pool.install_nvm(pid, page, dirty=dirty, slot=slot)

    def report_lines(self) -> list[str]:
        c = self.counters
        lines = [e.line() for e in self.events]
        lines.append(
            "summary "
            + " ".join(f"{s.value}={c.pages_by_state.get(s, 0)}" for s in PageState)
            + f" records_replayed={c.records_replayed}"
            + f" ssd_fetches_for_repair={c.ssd_fetches_for_repair}"
            + f" us={c.recovery_microseconds}")
        return lines


def repair_page(ctx: RestartContext, pid: int, state: PageState, image=None):
    """Bring a non-current page to its expected LSN.

    Behind images are rolled forward in place. Corrupted and Ahead images are
    replaced by the SSD copy and rolled forward from there. Returns the
    repaired page and the number of records replayed.
    """
    if state is PageState.CURRENT:
        raise ProtocolError(f"page {pid} is current; nothing to repair")
    expected = ctx.expected_for(pid)
    if state is PageState.BEHIND:
        if image is None:
            raise ProtocolError("behind repair needs the resident image")
        page = bytearray(image)
        base = core.page_lsn(page)
    else:
        page = ctx.pool.ssd.read(pid)
        ctx.counters.ssd_fetches_for_repair += 1
        base = core.page_lsn(page)
        if base > expected:
            raise ProtocolError(f"SSD image of page {pid} at {base} is newer than expected {expected}")
    n = replay(page, ctx.log.page_chain(pid, base, expected))
    if not n:
        # nothing to replay (e.g. a torn image whose SSD copy is already current)
        core.seal_page(page)
    return page, n


def rollback(pool, log: LogDevice, txn: int, last_lsn: int) -> int:
    """Undo ``txn`` backwards from ``last_lsn`` with CLRs and close it with ABORT.

    Returns the number of CLRs written. Records already compensated are
    skipped by following the CLRs' undo-next pointers.
    """
    lsn, clrs = last_lsn, 0
    while lsn != NULL_LSN:
        rec = log.get(lsn)
        if rec.txn_id != txn:
            raise LogIntegrityError(f"txn chain of {txn} reaches foreign record {lsn}")
        if rec.type == RecType.CLR:
            lsn = rec.undo_next_lsn
            continue
        if rec.type == RecType.UPDATE:
            with pool.fixed(rec.page_id, "w") as h:
                pool.compensate(h, rec)
            clrs += 1
        lsn = rec.prev_txn_lsn
    log.append(RecType.ABORT, txn)
    return clrs


def undo_losers(ctx: RestartContext) -> int:
    clrs = 0
    for txn in sorted(ctx.analysis.losers):
        clrs += rollback(ctx.pool, ctx.log, txn, ctx.analysis.last_txn_lsn[txn])
    if ctx.analysis.losers:
        ctx.log.flush_all()
    ctx.undo_done = True
    return clrs


def restart(pool, log: LogDevice, mode: str = "on_demand") -> RestartContext:
    """Recover the log tail, analyse it, and arm page repair.

    ``eager`` repairs every page named by the log or found on NVM right
    away; ``on_demand`` repairs each page at its first fix. Loser
    transactions are rolled back before this returns in both modes.
    """
    if mode not in ("eager", "on_demand"):
        raise ConfigError(f"unknown restart mode {mode!r}")
    t0 = time.perf_counter_ns()
    log.recover_tail()
    analysis = log.analyze()
    log.advance_lsn(max(pool.scan_nvm(), log.last_lsn))
    ctx = RestartContext(pool, log, analysis, mode)
    pool.recovery = ctx
    ctx.counters.recovery_ns += time.perf_counter_ns() - t0
    if mode == "eager":
        for pid in sorted(set(analysis.expected_lsn) | set(pool.nvm_candidates)):
            ctx.ensure(pid)
    t1, nested = time.perf_counter_ns(), ctx.counters.recovery_ns
    undo_losers(ctx)
    # repairs triggered by undo already booked their own time
    ctx.counters.recovery_ns += (time.perf_counter_ns() - t1) - (ctx.counters.recovery_ns - nested)
    return ctx
