import random

import pytest

from optipool import core
from optipool.bufferpool import WRITE, BufferPool
from optipool.core import ChecksumPolicy
from optipool.engine import Engine, EngineConfig
from optipool.errors import ConfigError, ProtocolError
from optipool.recovery import PageState, classify_page, repair_page, restart
from optipool.simpmem import SimPmem
from optipool.wal import LogDevice, RecType

from conftest import PAGE, make_pool


def write(pool, pid, off, data, txn=1):
    with pool.fixed(pid, WRITE) as h:
        before = bytes(pool.read(h)[off:off + len(data)])
        return pool.update_fixed(h, off, before, data, txn)


def commit(pool, txn=1):
    pool.log.append(RecType.COMMIT, txn)
    pool.log.flush_all()


def persisted_resident(pool, pid):
    pool.unfix(pool.fix_page(pid))
    pool.nvm.evict_random(10**6)


def crash_restart(pool, mode="on_demand"):
    image = pool.nvm.crash()
    log = LogDevice.from_bytes(pool.log.crash())
    nvm = SimPmem(pool.nvm.capacity, pool.nvm.cache_capacity_lines, 1, image=image.data)
    fresh = BufferPool(pool.ssd, log, nvm, pool.dram_frames, pool.nvm_slots, pool.policy,
                       pool.placement.config, pool.optimistic)
    ctx = restart(fresh, log, mode)
    return fresh, ctx


def state_of(ctx, pid):
    return next(e.state for e in ctx.events if e.page_id == pid)


def test_classify_page_states():
    policy = ChecksumPolicy()
    page = core.format_page(256, 1, core.PAGE_LEAF, policy, lsn=50)
    assert classify_page(page, policy, 50) is PageState.CURRENT
    assert classify_page(page, policy, 80) is PageState.BEHIND
    assert classify_page(page, policy, 20) is PageState.AHEAD
    page[100] ^= 1
    assert classify_page(page, policy, 50) is PageState.CORRUPTED


def test_current_page_adopted():
    pool = make_pool(dram=0)
    persisted_resident(pool, 3)
    write(pool, 3, 64, b"new")
    commit(pool)
    pool.nvm.evict_random(10**6)
    fresh, ctx = crash_restart(pool)
    with fresh.fixed(3) as h:
        assert bytes(fresh.read(h)[64:67]) == b"new"
    assert state_of(ctx, 3) is PageState.CURRENT
    assert ctx.counters.ssd_fetches_for_repair == 0 and ctx.counters.records_replayed == 0


def test_behind_page_repaired_without_ssd():
    pool = make_pool(dram=0)
    persisted_resident(pool, 3)
    write(pool, 3, 64, b"one")
    write(pool, 3, 300, b"two")
    commit(pool)
    fresh, ctx = crash_restart(pool)
    reads = fresh.ssd.reads
    with fresh.fixed(3) as h:
        img = fresh.read(h)
        assert bytes(img[64:67]) == b"one" and bytes(img[300:303]) == b"two"
    assert state_of(ctx, 3) is PageState.BEHIND
    assert ctx.counters.ssd_fetches_for_repair == 0 and fresh.ssd.reads == reads
    assert ctx.counters.records_replayed == 2


def test_torn_page_fetched_and_replayed():
    pool = make_pool(dram=0)
    persisted_resident(pool, 3)
    write(pool, 3, 100, b"A" * 10)
    write(pool, 3, 700, b"B" * 10)
    commit(pool)
    slot = pool.slot_map[3]
    assert pool.nvm.evict_line(slot * PAGE // 64 + 700 // 64)
    fresh, ctx = crash_restart(pool)
    with fresh.fixed(3) as h:
        img = fresh.read(h)
        assert bytes(img[100:110]) == b"A" * 10 and bytes(img[700:710]) == b"B" * 10
        assert core.verify_page(img)
    assert state_of(ctx, 3) is PageState.CORRUPTED
    assert ctx.counters.ssd_fetches_for_repair == 1


def test_ahead_page_rebuilt_from_ssd():
    pool = make_pool(dram=0)
    persisted_resident(pool, 3)
    write(pool, 3, 64, b"unlogged")
    pool.nvm.evict_random(10**6)  # image durable, log record not
    fresh, ctx = crash_restart(pool)
    with fresh.fixed(3) as h:
        assert bytes(fresh.read(h)[64:72]) == bytes(8)
        assert core.page_lsn(fresh.read(h)) == 0
    assert state_of(ctx, 3) is PageState.AHEAD
    assert ctx.counters.ssd_fetches_for_repair == 1
    # the lost LSN is never handed out again
    assert write(fresh, 3, 64, b"x") > core.page_lsn(pool.read_slot(pool.slot_map[3]))


def test_ssd_only_page_rolls_forward():
    pool = make_pool(dram=0)
    write(pool, 5, 64, b"hi")  # NVM image never persisted
    commit(pool)
    fresh, ctx = crash_restart(pool)
    with fresh.fixed(5) as h:
        assert bytes(fresh.read(h)[64:66]) == b"hi"
    assert state_of(ctx, 5) is PageState.BEHIND and ctx.counters.ssd_fetches_for_repair == 0


def test_repair_page_rejects_current():
    pool = make_pool(dram=0)
    fresh, ctx = crash_restart(pool)
    with pytest.raises(ProtocolError):
        repair_page(ctx, 1, PageState.CURRENT)
    with pytest.raises(ConfigError):
        restart(fresh, fresh.log, "lazy")


def test_loser_rolled_back_with_clrs():
    pool = make_pool(dram=0)
    write(pool, 2, 64, b"keep", txn=1)
    pool.log.append(RecType.COMMIT, 1)
    write(pool, 2, 80, b"drop", txn=2)
    write(pool, 6, 80, b"drop", txn=2)
    pool.log.flush_all()
    pool.nvm.evict_random(10**6)
    fresh, ctx = crash_restart(pool)
    assert ctx.analysis.losers == {2}
    types = [r.type for r in fresh.log.records()]
    assert types[-3:] == [RecType.CLR, RecType.CLR, RecType.ABORT]
    with fresh.fixed(2) as h:
        assert bytes(fresh.read(h)[64:68]) == b"keep" and bytes(fresh.read(h)[80:84]) == bytes(4)
    # a second crash right after undo must not undo again
    again, ctx2 = crash_restart(fresh)
    assert ctx2.analysis.losers == set()
    with again.fixed(6) as h:
        assert bytes(again.read(h)[80:84]) == bytes(4)


def test_partially_compensated_loser():
    pool = make_pool(dram=0)
    a = write(pool, 2, 64, b"aa", txn=4)
    write(pool, 2, 90, b"bb", txn=4)
    with pool.fixed(2, WRITE) as h:
        pool.compensate(h, pool.log.get(pool.log.txn_tail(4)))
    pool.log.flush_all()
    fresh, ctx = crash_restart(pool)
    clrs = [r for r in fresh.log.records() if r.type == RecType.CLR]
    assert len(clrs) == 2 and clrs[-1].undo_next_lsn == pool.log.get(a).prev_txn_lsn
    with fresh.fixed(2) as h:
        img = fresh.read(h)
        assert bytes(img[64:66]) == bytes(2) and bytes(img[90:92]) == bytes(2)


def run_engine(seed, ops=150):
    cfg = EngineConfig(page_size=1024, dram_frames=4, nvm_slots=24, ssd_pages=256,
                       cache_capacity_lines=64, seed=seed, max_key=16, max_value=64)
    eng = Engine.create(cfg)
    rng = random.Random(seed)
    committed, txn, pending = {}, None, {}
    for i in range(ops):
        if txn is None:
            txn, pending = eng.begin(), {}
        k = b"k%03d" % rng.randrange(200)
        v = rng.randbytes(rng.randint(1, 60))
        eng.insert(txn, k, v)
        pending[k] = v
        eng.nvm.evict_random(3)
        if i % 5 == 4:
            eng.commit(txn)
            committed.update(pending)
            txn = None
    return cfg, eng.crash(), sorted(committed.items())


@pytest.mark.parametrize("seed", range(6))
def test_eager_and_on_demand_agree(seed):
    cfg, state, want = run_engine(seed)
    lazy = Engine.recover(cfg, state, "on_demand")
    eager = Engine.recover(cfg, state, "eager")
    assert lazy.tree.check() == eager.tree.check() == want
    assert sum(eager.restart_ctx.counters.pages_by_state.values()) >= \
        sum(lazy.restart_ctx.counters.pages_by_state.values()) - 1


@pytest.mark.parametrize("seed", range(4))
def test_restart_is_idempotent(seed):
    cfg, state, want = run_engine(seed)
    first = Engine.recover(cfg, state, "on_demand")
    second = Engine.recover(cfg, first.crash(), "on_demand")
    assert second.tree.check() == want
    third = Engine.recover(cfg, second.crash(), "eager")
    assert third.tree.check() == want
