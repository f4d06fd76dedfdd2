import pytest

from optipool import core
from optipool.bufferpool import BufferPool, PlacementConfig, SsdStore
from optipool.core import ChecksumPolicy
from optipool.simpmem import SimPmem
from optipool.wal import LogDevice

PAGE = 1024


def formatted_store(pages=32, page_size=PAGE, policy=None):
    policy = policy or ChecksumPolicy()
    ssd = SsdStore(pages, page_size)
    for pid in range(pages):
        ssd.write(pid, core.format_page(page_size, pid, core.PAGE_LEAF, policy))
    ssd.reads = ssd.writes = 0
    return ssd


def make_pool(dram=2, slots=4, pages=32, policy=None, optimistic=True, cache_lines=4096,
              placement=None, seed=0):
    policy = policy or ChecksumPolicy()
    ssd = formatted_store(pages, PAGE, policy)
    nvm = SimPmem(slots * PAGE, cache_lines, seed)
    log = LogDevice()
    pool = BufferPool(ssd, log, nvm, dram, slots, policy, placement or PlacementConfig(), optimistic)
    return pool


@pytest.fixture
def pool():
    return make_pool()


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
