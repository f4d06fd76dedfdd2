import pytest

from optipool import core
from optipool.bufferpool import DRAM, NVM, READ, WRITE, PlacementConfig
from optipool.errors import BoundsError, CapacityError, ConfigError, ProtocolError

from conftest import make_pool


def write(pool, pid, off, data, txn=1):
    with pool.fixed(pid, WRITE) as h:
        before = bytes(pool.read(h)[off:off + len(data)])
        return pool.update_fixed(h, off, before, data, txn)


def test_miss_admits_to_nvm(pool):
    h = pool.fix_page(3)
    assert h.tier == NVM and pool.tier_of(3) == NVM
    pool.unfix(h)
    assert pool.stats.misses == 1 and pool.ssd.reads == 1


def test_heating_promotes_to_dram(pool):
    for _ in range(2):
        pool.unfix(pool.fix_page(3))
    assert pool.tier_of(3) == DRAM
    assert pool.stats.promotions == 1 and pool.stats.nvm_hits == 1


def test_cold_repeat_outside_window_stays_in_nvm():
    pool = make_pool(slots=8, placement=PlacementConfig(2, window=3))
    pool.unfix(pool.fix_page(1))
    for pid in (2, 3, 4):
        pool.unfix(pool.fix_page(pid))
    pool.unfix(pool.fix_page(1))
    assert pool.tier_of(1) == NVM


def test_dram_admission_policy():
    pool = make_pool(placement=PlacementConfig(admission=DRAM))
    with pool.fixed(5) as h:
        assert h.tier == DRAM
    with pytest.raises(ConfigError):
        make_pool(dram=0, placement=PlacementConfig(admission=DRAM))


def test_update_in_nvm_is_logged_and_sealed(pool):
    lsn = write(pool, 4, 100, b"abc")
    img = pool.read_slot(pool.slot_map[4])
    assert core.page_lsn(img) == lsn and core.verify_page(img)
    assert pool.is_dirty(4)
    assert pool.log.get(lsn).after == b"abc"
    assert pool.stats.nvm_wal_lead_writes >= 1  # log not flushed yet


def test_update_checks_intent_and_before_image(pool):
    h = pool.fix_page(4, READ)
    with pytest.raises(ProtocolError):
        pool.update_fixed(h, 100, b"\x00", b"x", 1)
    pool.unfix(h)
    with pytest.raises(ProtocolError):
        pool.unfix(h)
    with pool.fixed(4, WRITE) as h:
        with pytest.raises(ProtocolError):
            pool.update_fixed(h, 100, b"zz", b"xx", 1)
        with pytest.raises(BoundsError):
            pool.update_fixed(h, 4, b"\x00", b"x", 1)


def test_write_back_obeys_wal_rule(pool):
    lsn = write(pool, 4, 100, b"abc")
    assert pool.log.durable_lsn < lsn
    assert pool.write_to_ssd(4)
    assert pool.log.durable_lsn >= lsn
    assert pool.ssd.wal_violations == 0 and pool.ssd.peek_lsn(4) == lsn
    assert not pool.is_dirty(4) and not pool.write_to_ssd(4)


def test_ssd_flags_violation_and_refuses_torn_images(pool):
    page = core.format_page(pool.page_size, 4, core.PAGE_LEAF, pool.policy, lsn=999)
    pool.ssd.write(4, page)
    assert pool.ssd.wal_violations == 1
    page[500] ^= 1
    with pytest.raises(ProtocolError):
        pool.ssd.write(4, page)


def test_dram_eviction_demotes_dirty_pages():
    pool = make_pool(dram=1, slots=4)
    for _ in range(2):
        pool.unfix(pool.fix_page(1))
    lsn = write(pool, 1, 64, b"q")
    assert pool.tier_of(1) == DRAM
    for _ in range(2):
        pool.unfix(pool.fix_page(2))
    assert pool.tier_of(2) == DRAM and pool.tier_of(1) == NVM
    assert core.page_lsn(pool.read_slot(pool.slot_map[1])) == lsn
    assert pool.stats.demotions == 1


def test_nvm_eviction_writes_back_to_ssd():
    pool = make_pool(dram=0, slots=2)
    lsn = write(pool, 1, 64, b"q")
    pool.unfix(pool.fix_page(2))
    pool.unfix(pool.fix_page(3))
    assert pool.tier_of(1) is None
    assert pool.ssd.peek_lsn(1) == lsn and pool.ssd.wal_violations == 0


def test_pinned_pages_block_eviction():
    pool = make_pool(dram=0, slots=1)
    h = pool.fix_page(1)
    with pytest.raises(CapacityError):
        pool.fix_page(2)
    pool.unfix(h)
    pool.unfix(pool.fix_page(2))


def test_cleaner_round_robin(pool):
    for pid in (1, 2, 3):
        write(pool, pid, 64, b"c")
    assert pool.cleaner_step(2) == 2
    assert pool.cleaner_step(5) == 1
    assert not any(pool.is_dirty(p) for p in (1, 2, 3))


def test_explicit_evict(pool):
    pool.unfix(pool.fix_page(1))
    pool.unfix(pool.fix_page(2))
    assert pool.evict(NVM, 5) == 2
    assert pool.resident_pages() == []
    with pytest.raises(ConfigError):
        pool.evict("tape", 1)


def test_zero_dram_pool_works():
    pool = make_pool(dram=0, slots=3)
    for _ in range(3):
        with pool.fixed(1) as h:
            assert h.tier == NVM
    assert pool.hit_ratios() == (0.0, 2 / 3)


def test_pessimistic_mode_flushes_every_write():
    pool = make_pool(optimistic=False)
    write(pool, 1, 64, b"abc")
    c = pool.nvm.counters
    assert c.fences >= 2 and c.explicit_flushes >= pool.stats.nvm_page_writes
    assert pool.nvm.dirty_lines() == []


def test_optimistic_mode_never_flushes(pool):
    for i in range(20):
        write(pool, i % 6, 64 + i, b"x")
    pool.flush_all()
    assert pool.nvm.counters.explicit_flushes == 0 and pool.nvm.counters.fences == 0


def test_config_errors():
    with pytest.raises(ConfigError):
        make_pool(slots=0)
    with pytest.raises(ConfigError):
        PlacementConfig(promotion_threshold=0)


def test_hit_ratio_monotone_in_dram_size():
    import random
    rng = random.Random(2)
    trace = [int(rng.paretovariate(1.2)) % 30 for _ in range(600)]
    ratios = []
    for dram in range(0, 33, 4):
        p = make_pool(dram=dram, slots=30)
        for pid in trace:
            p.unfix(p.fix_page(pid))
        ratios.append(p.hit_ratios()[0])
    assert ratios == sorted(ratios)
