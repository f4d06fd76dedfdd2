"""CRC-64/ECMA-182 backend selection.

The compiled ``_crc64`` extension is used when it was built; otherwise the
pure-Python table implementation is loaded. Set ``OPTIPOOL_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _crc64_py

BACKEND = "python"
_impl = _crc64_py

if os.environ.get("OPTIPOOL_PURE_PYTHON") != "1":
    try:
        from . import _crc64 as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        pass

_update = _impl.crc64_update
_masked = _impl.crc64_masked


def _contiguous(data):
    if isinstance(data, (bytes, bytearray)):
        return data
    mv = memoryview(data)
    return mv if mv.contiguous and mv.format in ("B", "b", "c") else mv.tobytes()


def compute_checksum(data) -> int:
    """CRC-64/ECMA-182 of ``data`` (init 0, no reflection, xor-out 0)."""
    return _update(0, _contiguous(data))


def crc64_update(crc: int, data) -> int:
    return _update(crc, _contiguous(data))


def crc64_masked(data, start: int, stop: int, mask_start: int, mask_stop: int) -> int:
    """Checksum of ``data[start:stop]`` reading ``[mask_start, mask_stop)`` as zero bytes."""
    return _masked(_contiguous(data), start, stop, mask_start, mask_stop)
