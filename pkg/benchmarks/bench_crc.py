"""Compare the compiled CRC-64 kernel with the pure-Python fallback.

Run with ``python3 benchmarks/bench_crc.py``. Both backends are imported
directly so the result does not depend on OPTIPOOL_PURE_PYTHON.
"""

import argparse
import os
import timeit

from optipool import _crc64_py

try:
    from optipool import _crc64
except ImportError:
    _crc64 = None


def bench(mod, data: bytes, repeat: int) -> float:
    t = timeit.Timer(lambda: mod.crc64_masked(data, 0, len(data), 16, 24))
    return min(t.repeat(repeat=repeat, number=1))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="256,4096,16384")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print("size\tpython_us\tcython_us\tspeedup")
    for size in map(int, args.sizes.split(",")):
        data = os.urandom(size)
        py = bench(_crc64_py, data, args.repeat)
        if _crc64 is None:
            print(f"{size}\t{py * 1e6:.1f}\t-\t-")
            continue
        assert _crc64.crc64_masked(data, 0, size, 16, 24) == _crc64_py.crc64_masked(data, 0, size, 16, 24)
        cy = bench(_crc64, data, args.repeat * 20)
        print(f"{size}\t{py * 1e6:.1f}\t{cy * 1e6:.2f}\t{py / cy:.0f}x")


if __name__ == "__main__":
    main()
