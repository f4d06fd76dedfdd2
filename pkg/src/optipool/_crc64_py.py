"""Pure-Python CRC-64/ECMA-182, used when the compiled kernel is unavailable."""

POLY = 0x42F0E1EBA9EA3693
MASK = 0xFFFFFFFFFFFFFFFF


def _build_table():
    table = []
    for i in range(256):
        crc = i << 56
        for _ in range(8):
            crc = ((crc << 1) ^ POLY) if crc & (1 << 63) else (crc << 1)
        table.append(crc & MASK)
    return tuple(table)


TABLE = _build_table()


def crc64_update(crc, data):
    table = TABLE
    for b in bytes(data):
        crc = table[((crc >> 56) ^ b) & 0xFF] ^ ((crc << 8) & MASK)
    return crc


def crc64_masked(data, start, stop, mask_start, mask_stop):
    view = memoryview(data)
    lo = max(start, min(mask_start, stop))
    hi = max(lo, min(mask_stop, stop))
    crc = crc64_update(0, view[start:lo])
    crc = crc64_update(crc, bytes(hi - lo))
    return crc64_update(crc, view[hi:stop])
