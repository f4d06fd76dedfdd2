"""Page layout, LSNs and checksum maintenance.

A page is a ``bytearray`` of ``page_size`` bytes. The first 32 bytes hold the
header (all integers little-endian)::

    [0, 8)    page id
    [8, 16)   pageLSN
    [16, 24)  checksum (CRC-64/ECMA-182)
    24        page type
    25        fragment count (1 = one checksum over the whole page)
    [26, 32)  zero

In whole-page mode the checksum covers the full image with bytes [16, 24)
read as zero. With ``f > 1`` fragments a table of ``f`` u64 checksums sits at
the start of the payload. The payload ``[32, page_size)`` is split into ``f``
equal fragments; fragment 0 additionally covers the header as its prefix, and
both the header checksum field and the table are read as zero for it. The
header checksum field then covers the header plus the table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .checksum import compute_checksum, crc64_masked, crc64_update
from .errors import BoundsError, ConfigError, PageFormatError, ProtocolError

HEADER_SIZE = 32
DEFAULT_PAGE_SIZE = 4096
NULL_LSN = 0
NULL_PAGE = 0xFFFFFFFFFFFFFFFF
MAX_FRAGMENTS = 16

PAGE_FREE = 0
PAGE_META = 1
PAGE_INNER = 2
PAGE_LEAF = 3
PAGE_TYPES = (PAGE_FREE, PAGE_META, PAGE_INNER, PAGE_LEAF)

_HEADER = struct.Struct("<QQQBB6x")
_U64 = struct.Struct("<Q")
_ZERO8 = bytes(8)

CHECKSUM_OFF = 16
LSN_OFF = 8


@dataclass(frozen=True)
class PageHeader:
    page_id: int
    page_lsn: int
    checksum: int
    page_type: int
    fragment_count: int = 1

    def pack(self) -> bytes:
        return _HEADER.pack(self.page_id, self.page_lsn, self.checksum,
                            self.page_type, self.fragment_count)

    @classmethod
    def unpack(cls, data) -> "PageHeader":
        if len(data) < HEADER_SIZE:
            raise PageFormatError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
        return cls(*_HEADER.unpack_from(data, 0))


@dataclass(frozen=True)
class ChecksumPolicy:
    """When checksums are refreshed after an in-place update.

    ``mode`` is ``"every-update"``, ``"every-k"`` (reseal after ``k``
    updates) or ``"per-fragment"`` (``f`` checksums, only touched fragments
    are resealed).
    """

    mode: str = "every-update"
    k: int = 1
    f: int = 1

    def __post_init__(self):
        if self.mode not in ("every-update", "every-k", "per-fragment"):
            raise ConfigError(f"unknown checksum mode {self.mode!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 1 <= self.f <= MAX_FRAGMENTS:
            raise ConfigError(f"fragment count must be in [1, {MAX_FRAGMENTS}]")
        if self.mode != "per-fragment" and self.f != 1:
            raise ConfigError("fragment count only applies to per-fragment mode")

    @classmethod
    def every_update(cls):
        return cls()

    @classmethod
    def every_k(cls, k: int):
        return cls("every-k", k=k)

    @classmethod
    def per_fragment(cls, f: int):
        return cls("per-fragment", f=f)

    @classmethod
    def parse(cls, text: str) -> "ChecksumPolicy":
        """Parse ``every-update``, ``every-k:K`` or ``per-fragment:F``."""
        name, _, arg = text.partition(":")
        try:
            if name == "every-update" and not arg:
                return cls.every_update()
            if name == "every-k":
                return cls.every_k(int(arg))
            if name == "per-fragment":
                return cls.per_fragment(int(arg))
        except ValueError as exc:
            raise ConfigError(f"bad checksum policy {text!r}: {exc}") from None
        raise ConfigError(f"bad checksum policy {text!r}")

    def __str__(self):
        if self.mode == "every-k":
            return f"every-k:{self.k}"
        if self.mode == "per-fragment":
            return f"per-fragment:{self.f}"
        return "every-update"

    @property
    def fragments(self) -> int:
        return self.f if self.mode == "per-fragment" else 1


def check_geometry(page_size: int, fragments: int) -> None:
    """Raise :class:`PageFormatError` unless ``fragments`` tiles the payload."""
    if not 1 <= fragments <= MAX_FRAGMENTS:
        raise PageFormatError(f"fragment count {fragments} outside [1, {MAX_FRAGMENTS}]")
    payload = page_size - HEADER_SIZE
    if payload <= 0 or payload % fragments:
        raise PageFormatError(f"{fragments} fragments do not divide a {payload}-byte payload")
    if fragments > 1 and 8 * fragments > payload // fragments:
        raise PageFormatError("fragment checksum table does not fit in fragment 0")


def content_start(fragments: int) -> int:
    """First payload offset usable by page content (after the fragment table)."""
    return HEADER_SIZE if fragments == 1 else HEADER_SIZE + 8 * fragments


def page_id(page) -> int:
    return _U64.unpack_from(page, 0)[0]


def page_lsn(page) -> int:
    return _U64.unpack_from(page, LSN_OFF)[0]


def page_type(page) -> int:
    return page[24]


def fragment_count(page) -> int:
    return page[25]


def format_page(page_size: int, pid: int, ptype: int, policy: ChecksumPolicy,
                lsn: int = NULL_LSN) -> bytearray:
    """Fresh zero-payload page with a sealed header."""
    f = policy.fragments
    check_geometry(page_size, f)
    page = bytearray(page_size)
    _HEADER.pack_into(page, 0, pid, lsn, 0, ptype, f)
    seal_page(page)
    return page


def _fragment_bounds(size: int, f: int, i: int) -> tuple[int, int]:
    flen = (size - HEADER_SIZE) // f
    lo = HEADER_SIZE + i * flen
    return (0 if i == 0 else lo), lo + flen


def _fragment_crc(page, f: int, i: int) -> int:
    lo, hi = _fragment_bounds(len(page), f, i)
    if i:
        return crc64_update(0, memoryview(page)[lo:hi])
    mv = memoryview(page)
    table_end = HEADER_SIZE + 8 * f
    crc = crc64_update(0, mv[:CHECKSUM_OFF])
    crc = crc64_update(crc, _ZERO8)
    crc = crc64_update(crc, mv[CHECKSUM_OFF + 8:HEADER_SIZE])
    crc = crc64_update(crc, bytes(8 * f))
    return crc64_update(crc, mv[table_end:hi])


def _header_crc(page, f: int) -> int:
    return crc64_masked(page, 0, HEADER_SIZE + 8 * f, CHECKSUM_OFF, CHECKSUM_OFF + 8)


def _layout(page) -> int:
    if len(page) <= HEADER_SIZE:
        raise PageFormatError("page shorter than its header")
    f = page[25]
    check_geometry(len(page), f)
    return f


def whole_page_checksum(page) -> int:
    return crc64_masked(page, 0, len(page), CHECKSUM_OFF, CHECKSUM_OFF + 8)


def seal_page(page: bytearray, fragments=None) -> bytearray:
    """Recompute every stored checksum in place and return ``page``.

    ``fragments`` restricts per-fragment resealing to the given indexes; the
    header checksum is always refreshed.
    """
    f = _layout(page)
    if f == 1:
        _U64.pack_into(page, CHECKSUM_OFF, whole_page_checksum(page))
        return page
    for i in (range(f) if fragments is None else sorted(set(fragments))):
        _U64.pack_into(page, HEADER_SIZE + 8 * i, _fragment_crc(page, f, i))
    _U64.pack_into(page, CHECKSUM_OFF, _header_crc(page, f))
    return page


def verify_fragments(page) -> list[bool]:
    """Per-fragment verification results (one entry in whole-page mode)."""
    f = _layout(page)
    if f == 1:
        return [whole_page_checksum(page) == _U64.unpack_from(page, CHECKSUM_OFF)[0]]
    return [_fragment_crc(page, f, i) == _U64.unpack_from(page, HEADER_SIZE + 8 * i)[0]
            for i in range(f)]


def verify_page(page, policy: ChecksumPolicy | None = None) -> bool:
    """True iff every stored checksum matches; never raises on garbage."""
    try:
        f = _layout(page)
    except PageFormatError:
        return False
    if policy is not None and policy.fragments != f:
        return False
    if f > 1 and _header_crc(page, f) != _U64.unpack_from(page, CHECKSUM_OFF)[0]:
        return False
    return all(verify_fragments(page))


def touched_fragments(page_size: int, f: int, offset: int, length: int) -> set[int]:
    flen = (page_size - HEADER_SIZE) // f
    first = (max(offset, HEADER_SIZE) - HEADER_SIZE) // flen
    last = (max(offset + length - 1, HEADER_SIZE) - HEADER_SIZE) // flen
    return {0, *range(first, min(last, f - 1) + 1)}


def apply_delta(page: bytearray, offset: int, after, lsn: int, policy: ChecksumPolicy,
                updates_since_seal: int = 0) -> int:
    """Write ``after`` at ``offset``, set pageLSN and reseal per ``policy``.

    Mutates ``page`` and returns the new updates-since-seal counter (0 right
    after a seal).
    """
    size = len(page)
    if offset < HEADER_SIZE or offset + len(after) > size:
        raise BoundsError(f"delta [{offset}, {offset + len(after)}) outside payload of {size}-byte page")
    if policy.mode == "per-fragment" and offset < content_start(policy.f) and after:
        raise BoundsError(f"delta at {offset} overlaps the fragment checksum table")
    if lsn <= page_lsn(page):
        raise ProtocolError(f"lsn {lsn} not above pageLSN {page_lsn(page)}")
    page[offset:offset + len(after)] = after
    _U64.pack_into(page, LSN_OFF, lsn)
    if policy.mode == "every-k":
        updates_since_seal += 1
        if updates_since_seal < policy.k:
            return updates_since_seal
        seal_page(page)
        return 0
    if policy.mode == "per-fragment":
        seal_page(page, touched_fragments(size, policy.f, offset, len(after)))
    else:
        seal_page(page)
    return 0


def set_page_lsn(page: bytearray, lsn: int) -> None:
    _U64.pack_into(page, LSN_OFF, lsn)


__all__ = [
    "ChecksumPolicy", "PageHeader", "HEADER_SIZE", "DEFAULT_PAGE_SIZE", "NULL_LSN",
    "NULL_PAGE", "PAGE_FREE", "PAGE_META", "PAGE_INNER", "PAGE_LEAF",
    "apply_delta", "compute_checksum", "content_start", "format_page", "page_id",
    "page_lsn", "page_type", "seal_page", "verify_fragments", "verify_page",
]
