"""Cache-line model of byte-addressable NVM behind a volatile CPU cache.

Writes land in a shadow of dirty lines. Lines reach the persistent image only
when evicted (randomly, under capacity pressure or on request) or explicitly
flushed. ``crash`` drops the shadow. Everything is driven by a seeded RNG so
eviction sequences and crash images replay bit-for-bit.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .errors import BoundsError, CapacityError, ConfigError

LINE_SIZE = 64
MAX_ENUM_LINES = 16


@dataclass(frozen=True)
class CrashImage:
    data: bytes

    def __len__(self):
        return len(self.data)


@dataclass
class PmemCounters:
    writes: int = 0
    reads: int = 0
    evictions: int = 0
    explicit_flushes: int = 0
    fences: int = 0

    def as_dict(self):
        return dict(self.__dict__)


class SimPmem:
    def __init__(self, capacity: int, cache_capacity_lines: int = 512, seed: int = 0,
                 line_size: int = LINE_SIZE, image=None):
        if line_size <= 0 or capacity % line_size:
            raise ConfigError(f"capacity {capacity} is not a multiple of line size {line_size}")
        if cache_capacity_lines < 1:
            raise ConfigError("cache must hold at least one line")
        self.capacity = capacity
        self.line_size = line_size
        self.cache_capacity_lines = cache_capacity_lines
        self.seed = seed
        self._rng = random.Random(seed)
        if image is None:
            self.persistent_image = bytearray(capacity)
        else:
            if len(image) != capacity:
                raise ConfigError(f"image is {len(image)} bytes, device is {capacity}")
            self.persistent_image = bytearray(image)
        # dirty lines; _order/_pos give O(1) uniform random choice
        self.shadow: dict[int, bytearray] = {}
        self._order: list[int] = []
        self._pos: dict[int, int] = {}
        self.counters = PmemCounters()

    # -- internals -----------------------------------------------------
    def _check(self, addr: int, length: int):
        if addr < 0 or length < 0 or addr + length > self.capacity:
            raise BoundsError(f"[{addr}, {addr + length}) outside device of {self.capacity} bytes")

    def _drop(self, line: int) -> bytearray:
        data = self.shadow.pop(line)
        i = self._pos.pop(line)
        last = self._order.pop()
        if last != line:
            self._order[i] = last
            self._pos[last] = i
        return data

    def _writeback(self, line: int):
        data = self._drop(line)
        base = line * self.line_size
        self.persistent_image[base:base + self.line_size] = data

    def _evict_one(self) -> int:
        line = self._order[self._rng.randrange(len(self._order))]
        self._writeback(line)
        self.counters.evictions += 1
        return line

    # -- public operations --------------------------------------------
    def write(self, addr: int, data) -> None:
        n = len(data)
        self._check(addr, n)
        self.counters.writes += 1
        if not n:
            return
        ls = self.line_size
        mv = memoryview(data)
        first, last = addr // ls, (addr + n - 1) // ls
        shadow = self.shadow
        for line in range(first, last + 1):
            buf = shadow.get(line)
            if buf is None:
                base = line * ls
                buf = self.persistent_image[base:base + ls]
                shadow[line] = buf
                self._pos[line] = len(self._order)
                self._order.append(line)
            lo = max(addr, line * ls)
            hi = min(addr + n, (line + 1) * ls)
            buf[lo - line * ls:hi - line * ls] = mv[lo - addr:hi - addr]
        while len(shadow) > self.cache_capacity_lines:
            self._evict_one()

    def read(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        self.counters.reads += 1
        out = bytearray(self.persistent_image[addr:addr + length])
        if self.shadow and length:
            ls = self.line_size
            for line in range(addr // ls, (addr + length - 1) // ls + 1):
                buf = self.shadow.get(line)
                if buf is not None:
                    lo = max(addr, line * ls)
                    hi = min(addr + length, (line + 1) * ls)
                    out[lo - addr:hi - addr] = buf[lo - line * ls:hi - line * ls]
        return bytes(out)

    def evict_random(self, n: int) -> int:
        done = 0
        while done < n and self._order:
            self._evict_one()
            done += 1
        return done

    def evict_line(self, line: int) -> bool:
        """Write back one specific line if dirty (test hook for torn writes)."""
        if line not in self.shadow:
            return False
        self._writeback(line)
        self.counters.evictions += 1
        return True

    def flush(self, addr: int, length: int) -> None:
        self._check(addr, length)
        if not length:
            return
        ls = self.line_size
        for line in range(addr // ls, (addr + length - 1) // ls + 1):
            self.counters.explicit_flushes += 1
            if line in self.shadow:
                self._writeback(line)

    def fence(self) -> None:
        self.counters.fences += 1

    def dirty_lines(self, addr: int = 0, length: int | None = None) -> list[int]:
        if length is None:
            length = self.capacity - addr
        ls = self.line_size
        lo, hi = addr // ls, (addr + length + ls - 1) // ls
        return sorted(line for line in self.shadow if lo <= line < hi)

    def crash(self) -> CrashImage:
        image = CrashImage(bytes(self.persistent_image))
        self.shadow.clear()
        self._order.clear()
        self._pos.clear()
        return image

    def enumerate_crash_images(self, addr: int, length: int) -> Iterator[CrashImage]:
        """Every crash image reachable by evicting a subset of the region's dirty lines."""
        self._check(addr, length)
        dirty = self.dirty_lines(addr, length)
        if len(dirty) > MAX_ENUM_LINES:
            raise CapacityError(f"{len(dirty)} dirty lines exceed enumeration limit {MAX_ENUM_LINES}")
        ls = self.line_size
        for mask in range(1 << len(dirty)):
            img = bytearray(self.persistent_image)
            for bit, line in enumerate(dirty):
                if mask >> bit & 1:
                    img[line * ls:(line + 1) * ls] = self.shadow[line]
            yield CrashImage(bytes(img))

    def logical_view(self) -> bytes:
        return self.read(0, self.capacity)

    def dump(self, path) -> None:
        """Persist the durable image (raw bytes, length == capacity)."""
        Path(path).write_bytes(bytes(self.persistent_image))

    @classmethod
    def load(cls, path, cache_capacity_lines: int = 512, seed: int = 0,
             line_size: int = LINE_SIZE) -> "SimPmem":
        data = Path(path).read_bytes()
        return cls(len(data), cache_capacity_lines, seed, line_size, image=data)


# functional aliases mirroring the device vocabulary
def pm_write(dev: SimPmem, addr: int, data) -> None:
    dev.write(addr, data)


def pm_read(dev: SimPmem, addr: int, length: int) -> bytes:
    return dev.read(addr, length)


def pm_evict_random(dev: SimPmem, n: int) -> int:
    return dev.evict_random(n)


def pm_flush(dev: SimPmem, addr: int, length: int) -> None:
    dev.flush(addr, length)


def pm_crash(dev: SimPmem) -> CrashImage:
    return dev.crash()


def enumerate_crash_images(dev: SimPmem, addr: int, length: int) -> Iterator[CrashImage]:
    return dev.enumerate_crash_images(addr, length)
