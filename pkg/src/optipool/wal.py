"""Physiological write-ahead log with per-page and per-transaction chains.

The log is a byte file starting with an 8-byte magic. LSNs are addresses in
a logical log space: a record's LSN grows by the encoded length of its
predecessor, and restart may skip ahead (never back) so that no LSN observed
before a crash is ever reassigned.

Record layout (little-endian)::

    u32 length      total encoded bytes including this field and the CRC
    u64 lsn
    u8  type
    u64 txn_id
    u64 page_id     NULL_PAGE for COMMIT/ABORT/END_CHECKPOINT
    u64 prev_page_lsn
    u64 prev_txn_lsn
    u32 offset
    u32 len(before)
    u32 len(after)
    u64 undo_next_lsn
    ... before bytes, after bytes
    u32 crc32       zlib CRC-32 over every preceding byte of the record
"""

from __future__ import annotations

import bisect
import enum
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .core import NULL_LSN, NULL_PAGE
from .errors import LogIntegrityError, PageFormatError, ProtocolError

LOG_MAGIC = b"OPLOG\x00\x01\x00"
_HDR = struct.Struct("<IQBQQQQIIIQ")
_CRC = struct.Struct("<I")
MIN_RECORD = _HDR.size + _CRC.size


class RecType(enum.IntEnum):
    UPDATE = 1
    CLR = 2
    COMMIT = 3
    ABORT = 4
    PAGE_FORMAT = 5
    END_CHECKPOINT = 6


PAGE_RECORDS = (RecType.UPDATE, RecType.CLR, RecType.PAGE_FORMAT)


@dataclass(frozen=True)
class LogRecord:
    lsn: int
    type: RecType
    txn_id: int
    page_id: int = NULL_PAGE
    prev_page_lsn: int = NULL_LSN
    prev_txn_lsn: int = NULL_LSN
    offset: int = 0
    before: bytes = b""
    after: bytes = b""
    undo_next_lsn: int = NULL_LSN

    def encode(self) -> bytes:
        length = MIN_RECORD + len(self.before) + len(self.after)
        body = _HDR.pack(length, self.lsn, int(self.type), self.txn_id, self.page_id,
                         self.prev_page_lsn, self.prev_txn_lsn, self.offset,
                         len(self.before), len(self.after), self.undo_next_lsn)
        body += self.before + self.after
        return body + _CRC.pack(zlib.crc32(body))

    @property
    def encoded_size(self) -> int:
        return MIN_RECORD + len(self.before) + len(self.after)

    @classmethod
    def decode(cls, data, pos: int = 0) -> "LogRecord":
        """Decode the record at ``pos``; raise :class:`LogIntegrityError` if torn."""
        if len(data) - pos < MIN_RECORD:
            raise LogIntegrityError(f"truncated record header at {pos}")
        (length, lsn, rtype, txn, pid, prev_page, prev_txn, offset,
         nb, na, undo_next) = _HDR.unpack_from(data, pos)
        if length != MIN_RECORD + nb + na or pos + length > len(data):
            raise LogIntegrityError(f"bad record length at {pos}")
        end = pos + length - _CRC.size
        if zlib.crc32(data[pos:end]) != _CRC.unpack_from(data, end)[0]:
            raise LogIntegrityError(f"record CRC mismatch at {pos}")
        try:
            rtype = RecType(rtype)
        except ValueError:
            raise LogIntegrityError(f"unknown record type {rtype} at {pos}") from None
        body = pos + _HDR.size
        return cls(lsn, rtype, txn, pid, prev_page, prev_txn, offset,
                   bytes(data[body:body + nb]), bytes(data[body + nb:body + nb + na]),
                   undo_next)


def _validate(rtype: RecType, page_id: int, before: bytes, after: bytes, undo_next: int):
    if rtype in PAGE_RECORDS and page_id == NULL_PAGE:
        raise PageFormatError(f"{rtype.name} record needs a page id")
    if rtype not in PAGE_RECORDS and (page_id != NULL_PAGE or before or after):
        raise PageFormatError(f"{rtype.name} record carries page data")
    if rtype == RecType.UPDATE and len(before) != len(after):
        raise PageFormatError("UPDATE before/after images differ in length")
    if rtype in (RecType.CLR, RecType.PAGE_FORMAT) and before:
        raise PageFormatError(f"{rtype.name} record carries a before image")
    if rtype != RecType.CLR and undo_next != NULL_LSN:
        raise PageFormatError("undo_next_lsn only applies to CLRs")


@dataclass
class AnalysisResult:
    expected_lsn: dict[int, int] = field(default_factory=dict)
    losers: set[int] = field(default_factory=set)
    last_txn_lsn: dict[int, int] = field(default_factory=dict)
    winners: set[int] = field(default_factory=set)
    last_lsn: int = NULL_LSN


class LogDevice:
    """Append-only log on the simulated SSD with an explicit durable boundary."""

    def __init__(self):
        self._buf = bytearray(LOG_MAGIC)
        self._lsns: list[int] = []
        self._ends: list[int] = []  # file offset just past each record
        self._records: dict[int, LogRecord] = {}
        self._page_tail: dict[int, int] = {}
        self._txn_tail: dict[int, int] = {}
        self.next_lsn = len(LOG_MAGIC)
        self.durable_lsn = NULL_LSN
        self._durable_end = len(LOG_MAGIC)
        self.flushes = 0
        self.appends = 0
        self._recovered = True

    # -- normal processing --------------------------------------------
    @property
    def last_lsn(self) -> int:
        return self._lsns[-1] if self._lsns else NULL_LSN

    def append(self, rtype: RecType, txn_id: int, page_id: int = NULL_PAGE, offset: int = 0,
               before: bytes = b"", after: bytes = b"", undo_next_lsn: int = NULL_LSN) -> int:
        rtype = RecType(rtype)
        before, after = bytes(before), bytes(after)
        _validate(rtype, page_id, before, after, undo_next_lsn)
        lsn = self.next_lsn
        rec = LogRecord(lsn, rtype, txn_id, page_id,
                        self._page_tail.get(page_id, NULL_LSN) if rtype in PAGE_RECORDS else NULL_LSN,
                        self._txn_tail.get(txn_id, NULL_LSN), offset, before, after, undo_next_lsn)
        self._buf += rec.encode()
        self._lsns.append(lsn)
        self._ends.append(len(self._buf))
        self._records[lsn] = rec
        if rtype in PAGE_RECORDS:
            self._page_tail[page_id] = lsn
        self._txn_tail[txn_id] = lsn
        self.next_lsn = lsn + rec.encoded_size
        self.appends += 1
        return lsn

    def flush(self, up_to: int) -> None:
        """Make every record with ``lsn <= up_to`` durable."""
        if up_to <= self.durable_lsn:
            return
        if up_to > self.last_lsn:
            raise ProtocolError(f"flush to {up_to} beyond last appended lsn {self.last_lsn}")
        i = bisect.bisect_right(self._lsns, up_to) - 1
        self.durable_lsn = self._lsns[i]
        self._durable_end = self._ends[i]
        self.flushes += 1

    def flush_all(self) -> None:
        if self._lsns:
            self.flush(self._lsns[-1])

    def advance_lsn(self, floor: int) -> None:
        """Never hand out an LSN at or below ``floor`` from now on."""
        self.next_lsn = max(self.next_lsn, floor + 1)

    def get(self, lsn: int) -> LogRecord:
        try:
            return self._records[lsn]
        except KeyError:
            raise LogIntegrityError(f"no log record at lsn {lsn}") from None

    def records(self, durable_only: bool = False):
        limit = self.durable_lsn if durable_only else self.last_lsn
        for lsn in self._lsns:
            if lsn > limit:
                break
            yield self._records[lsn]

    def page_tail(self, page_id: int) -> int:
        return self._page_tail.get(page_id, NULL_LSN)

    def txn_tail(self, txn_id: int) -> int:
        return self._txn_tail.get(txn_id, NULL_LSN)

    # -- crash and restart --------------------------------------------
    def durable_bytes(self) -> bytes:
        return bytes(self._buf[:self._durable_end])

    def crash(self) -> bytes:
        """Durable log content surviving a crash; the volatile tail is lost."""
        return self.durable_bytes()

    def dump(self, path) -> None:
        Path(path).write_bytes(self.durable_bytes())

    @classmethod
    def from_bytes(cls, data) -> "LogDevice":
        """Post-crash device; call :meth:`recover_tail` before reading it."""
        dev = cls()
        if data:
            if bytes(data[:len(LOG_MAGIC)]) != LOG_MAGIC:
                raise LogIntegrityError("bad log magic")
            dev._buf = bytearray(data)
        dev._recovered = False
        return dev

    @classmethod
    def load(cls, path) -> "LogDevice":
        return cls.from_bytes(Path(path).read_bytes())

    def recover_tail(self) -> int:
        """Scan from the origin, cut the log at the first invalid record.

        Returns the last valid LSN (``NULL_LSN`` for an empty log).
        """
        data = self._buf
        pos = len(LOG_MAGIC)
        self._lsns, self._ends, self._records = [], [], {}
        self._page_tail, self._txn_tail = {}, {}
        last = NULL_LSN
        while pos < len(data):
            try:
                rec = LogRecord.decode(data, pos)
            except LogIntegrityError:
                break
            if rec.lsn <= last:
                break
            pos += rec.encoded_size
            self._lsns.append(rec.lsn)
            self._ends.append(pos)
            self._records[rec.lsn] = rec
            if rec.type in PAGE_RECORDS:
                self._page_tail[rec.page_id] = rec.lsn
            self._txn_tail[rec.txn_id] = rec.lsn
            last = rec.lsn
        del self._buf[pos:]
        self.durable_lsn = last
        self._durable_end = pos
        self.next_lsn = (last + self._records[last].encoded_size) if last else len(LOG_MAGIC)
        self._recovered = True
        return last

    def analyze(self) -> AnalysisResult:
        """One forward pass over the durable log."""
        if not self._recovered:
            raise ProtocolError("recover_tail must run before analysis")
        res = AnalysisResult()
        seen: set[int] = set()
        for rec in self.records(durable_only=True):
            seen.add(rec.txn_id)
            res.last_txn_lsn[rec.txn_id] = rec.lsn
            if rec.type in PAGE_RECORDS:
                res.expected_lsn[rec.page_id] = rec.lsn
            elif rec.type in (RecType.COMMIT, RecType.ABORT):
                res.winners.add(rec.txn_id)
            res.last_lsn = rec.lsn
        res.losers = seen - res.winners
        # checkpoint markers use txn 0 and never form a transaction
        res.losers.discard(0)
        return res

    def page_chain(self, page_id: int, from_exclusive: int, to_inclusive: int) -> list[LogRecord]:
        """Records of ``page_id`` with ``from_exclusive < lsn <= to_inclusive``, ascending."""
        out: list[LogRecord] = []
        if to_inclusive <= from_exclusive:
            return out
        lsn = self._page_tail.get(page_id, NULL_LSN)
        while lsn != NULL_LSN and lsn > from_exclusive:
            rec = self._records.get(lsn)
            if rec is None or rec.page_id != page_id:
                raise LogIntegrityError(f"broken chain link {lsn} for page {page_id}")
            if lsn <= to_inclusive:
                out.append(rec)
            lsn = rec.prev_page_lsn
        if lsn != from_exclusive and from_exclusive != NULL_LSN:
            raise LogIntegrityError(
                f"page {page_id} chain does not contain lsn {from_exclusive}")
        if not out or out[0].lsn != to_inclusive:
            raise LogIntegrityError(
                f"page {page_id} chain does not reach lsn {to_inclusive}")
        out.reverse()
        return out


# functional aliases
def log_append(dev: LogDevice, *args, **kwargs) -> int:
    return dev.append(*args, **kwargs)


def log_flush(dev: LogDevice, up_to: int) -> None:
    dev.flush(up_to)


def log_recover_tail(dev: LogDevice) -> int:
    return dev.recover_tail()


def log_analyze(dev: LogDevice) -> AnalysisResult:
    return dev.analyze()


def page_chain(dev: LogDevice, page_id: int, from_exclusive: int, to_inclusive: int):
    return dev.page_chain(page_id, from_exclusive, to_inclusive)
