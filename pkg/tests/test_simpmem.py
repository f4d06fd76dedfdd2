import pytest

from optipool.errors import BoundsError, CapacityError, ConfigError
from optipool.simpmem import SimPmem, enumerate_crash_images, pm_crash, pm_evict_random, pm_flush, pm_read, pm_write


def test_write_is_volatile_until_evicted():
    dev = SimPmem(1024, cache_capacity_lines=8)
    pm_write(dev, 10, b"hello")
    assert pm_read(dev, 10, 5) == b"hello"
    assert dev.dirty_lines() == [0]
    assert pm_crash(dev).data[10:15] == bytes(5)
    assert dev.read(10, 5) == bytes(5)


def test_flush_persists_and_counts():
    dev = SimPmem(1024)
    dev.write(60, b"x" * 10)  # straddles lines 0 and 1
    pm_flush(dev, 60, 10)
    assert dev.counters.explicit_flushes == 2
    assert dev.dirty_lines() == []
    assert dev.crash().data[60:70] == b"x" * 10


def test_capacity_pressure_evicts():
    dev = SimPmem(64 * 32, cache_capacity_lines=4)
    for line in range(10):
        dev.write(line * 64, b"\x01")
    assert len(dev.dirty_lines()) == 4
    assert dev.counters.evictions == 6


def test_eviction_is_seeded():
    def run(seed):
        dev = SimPmem(64 * 64, cache_capacity_lines=64, seed=seed)
        for line in range(40):
            dev.write(line * 64, bytes([line + 1]))
        pm_evict_random(dev, 15)
        return dev.crash().data
    assert run(3) == run(3)
    assert run(3) != run(4)


def test_enumerate_crash_images_power_set():
    dev = SimPmem(256)
    dev.write(0, b"\x01" * 256)
    images = {img.data for img in enumerate_crash_images(dev, 0, 256)}
    assert len(images) == 16
    assert bytes(256) in images and b"\x01" * 256 in images
    big = SimPmem(64 * 20, cache_capacity_lines=32)
    big.write(0, b"\x02" * (64 * 17))
    with pytest.raises(CapacityError):
        next(big.enumerate_crash_images(0, 64 * 17))


def test_bounds_and_config():
    dev = SimPmem(128)
    with pytest.raises(BoundsError):
        dev.write(120, b"123456789")
    with pytest.raises(ConfigError):
        SimPmem(100)
    with pytest.raises(ConfigError):
        SimPmem(128, cache_capacity_lines=0)


def test_dump_load_roundtrip(tmp_path):
    dev = SimPmem(256)
    dev.write(0, b"abc")
    dev.flush(0, 3)
    dev.write(100, b"lost")
    dev.dump(tmp_path / "nvm.img")
    again = SimPmem.load(tmp_path / "nvm.img")
    assert again.read(0, 3) == b"abc" and again.read(100, 4) == bytes(4)
