import random

import pytest

from optipool.core import NULL_LSN, NULL_PAGE
from optipool.errors import LogIntegrityError, PageFormatError, ProtocolError
from optipool.wal import LOG_MAGIC, LogDevice, LogRecord, RecType


def small_log():
    log = LogDevice()
    a = log.append(RecType.UPDATE, 1, 5, 40, b"aa", b"bb")
    b = log.append(RecType.UPDATE, 2, 6, 40, b"cc", b"dd")
    c = log.append(RecType.UPDATE, 1, 5, 50, b"ee", b"ff")
    d = log.append(RecType.COMMIT, 1)
    return log, (a, b, c, d)


def test_lsns_are_byte_addresses():
    log, (a, b, c, d) = small_log()
    assert a == len(LOG_MAGIC)
    assert b == a + log.get(a).encoded_size
    assert log.next_lsn == d + log.get(d).encoded_size


def test_chains():
    log, (a, b, c, d) = small_log()
    assert log.get(c).prev_page_lsn == a and log.get(c).prev_txn_lsn == a
    assert log.get(d).prev_txn_lsn == c and log.get(d).page_id == NULL_PAGE
    assert [r.lsn for r in log.page_chain(5, NULL_LSN, c)] == [a, c]
    assert [r.lsn for r in log.page_chain(5, a, c)] == [c]
    assert log.page_chain(5, c, c) == []
    with pytest.raises(LogIntegrityError):
        log.page_chain(5, b, c)  # b is not on page 5's chain


def test_encode_decode_roundtrip():
    log, lsns = small_log()
    for lsn in lsns:
        rec = log.get(lsn)
        assert LogRecord.decode(rec.encode()) == rec


def test_record_validation():
    log = LogDevice()
    with pytest.raises(PageFormatError):
        log.append(RecType.UPDATE, 1)
    with pytest.raises(PageFormatError):
        log.append(RecType.COMMIT, 1, 4)
    with pytest.raises(PageFormatError):
        log.append(RecType.UPDATE, 1, 4, 40, b"a", b"bc")


def test_flush_and_crash_drop_tail():
    log, (a, b, c, d) = small_log()
    with pytest.raises(ProtocolError):
        log.flush(d + 1)
    log.flush(b)
    assert log.durable_lsn == b
    again = LogDevice.from_bytes(log.crash())
    assert again.recover_tail() == b
    assert [r.lsn for r in again.records()] == [a, b]


@pytest.mark.parametrize("cut", [1, 5, 20, 40])
def test_torn_tail_is_truncated(cut):
    log, (a, b, c, d) = small_log()
    log.flush_all()
    data = log.durable_bytes()
    end_b = b + log.get(b).encoded_size
    again = LogDevice.from_bytes(data[:end_b + cut])
    assert again.recover_tail() == b
    corrupt = bytearray(data)
    corrupt[end_b + 15] ^= 0x40
    again = LogDevice.from_bytes(bytes(corrupt))
    assert again.recover_tail() == b


def test_bad_magic():
    with pytest.raises(LogIntegrityError):
        LogDevice.from_bytes(b"NOTALOG!")


def test_analysis_requires_recovered_tail():
    dev = LogDevice.from_bytes(LOG_MAGIC)
    with pytest.raises(ProtocolError):
        dev.analyze()


def test_advance_lsn_never_reuses():
    log, lsns = small_log()
    log.flush_all()
    dev = LogDevice.from_bytes(log.crash())
    dev.recover_tail()
    dev.advance_lsn(10_000)
    assert dev.append(RecType.ABORT, 9) == 10_001


def test_analysis_matches_brute_force():
    rng = random.Random(11)
    for trial in range(30):
        log = LogDevice()
        for _ in range(rng.randint(1, 40)):
            txn = rng.randint(1, 5)
            if rng.random() < 0.15:
                log.append(rng.choice([RecType.COMMIT, RecType.ABORT]), txn)
            else:
                log.append(RecType.UPDATE, txn, rng.randint(0, 6), 40, b"x", b"y")
        log.flush(rng.choice([r.lsn for r in log.records()]))
        dev = LogDevice.from_bytes(log.crash())
        dev.recover_tail()
        res = dev.analyze()
        durable = [r for r in log.records() if r.lsn <= log.durable_lsn]
        expected, seen, done = {}, set(), set()
        for r in durable:
            seen.add(r.txn_id)
            if r.type == RecType.UPDATE:
                expected[r.page_id] = r.lsn
            else:
                done.add(r.txn_id)
        assert res.expected_lsn == expected
        assert res.losers == seen - done
        assert res.winners == done
        assert res.last_lsn == durable[-1].lsn


def test_file_roundtrip(tmp_path):
    log, lsns = small_log()
    log.flush_all()
    log.dump(tmp_path / "log.bin")
    dev = LogDevice.load(tmp_path / "log.bin")
    assert dev.recover_tail() == lsns[-1]
    assert [r.lsn for r in dev.records()] == list(lsns)
