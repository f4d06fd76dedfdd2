# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CRC-64/ECMA-182 kernel (MSB-first, polynomial 0x42F0E1EBA9EA3693)."""

from libc.stdint cimport uint64_t

cdef uint64_t POLY = 0x42F0E1EBA9EA3693ULL
cdef uint64_t TABLE[256]


cdef void _build_table():
    cdef uint64_t crc
    cdef int i, j
    for i in range(256):
        crc = (<uint64_t>i) << 56
        for j in range(8):
            if crc & 0x8000000000000000ULL:
                crc = (crc << 1) ^ POLY
            else:
                crc = crc << 1
        TABLE[i] = crc


_build_table()


cdef inline uint64_t _update(uint64_t crc, const unsigned char[::1] data) noexcept nogil:
    cdef Py_ssize_t i
    cdef Py_ssize_t n = data.shape[0]
    for i in range(n):
        crc = TABLE[((crc >> 56) ^ data[i]) & 0xFF] ^ (crc << 8)
    return crc


def crc64_update(uint64_t crc, const unsigned char[::1] data):
    """Feed ``data`` into a running CRC and return the new register value."""
    return _update(crc, data)


def crc64_masked(const unsigned char[::1] data, Py_ssize_t start, Py_ssize_t stop,
                 Py_ssize_t mask_start, Py_ssize_t mask_stop):
    """CRC of ``data[start:stop]`` with ``[mask_start, mask_stop)`` read as zeros."""
    cdef uint64_t crc = 0
    cdef Py_ssize_t i
    cdef unsigned char b
    for i in range(start, stop):
        if mask_start <= i < mask_stop:
            b = 0
        else:
            b = data[i]
        crc = TABLE[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)
    return crc
