# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled bitstream kernels.

Bit-exact twin of ``_kernels_py`` (see that module for the stream layout);
this version exists purely for speed on the sequential decode paths.
"""

import numpy as np

from libc.stdint cimport int64_t, uint8_t, uint32_t, uint64_t


def rice_encode(values, int k):
    cdef uint64_t[::1] vals = np.ascontiguousarray(values, dtype=np.uint64)
    cdef Py_ssize_t n = vals.shape[0]
    if n == 0:
        return b""
    cdef Py_ssize_t i
    cdef int64_t total_bits = 0
    for i in range(n):
        total_bits += <int64_t> (vals[i] >> k) + 1 + k
    out_arr = np.zeros((total_bits + 7) // 8, dtype=np.uint8)
    cdef uint8_t[::1] out = out_arr
    cdef int64_t bitpos = 0
    cdef uint64_t q, rem
    cdef int j
    for i in range(n):
        q = vals[i] >> k
        while q > 0:
            out[bitpos >> 3] |= 1 << (7 - (bitpos & 7))
            bitpos += 1
            q -= 1
        bitpos += 1  # terminator bit stays zero
        if k > 0:
            rem = vals[i] & ((<uint64_t> 1 << k) - 1)
            for j in range(k - 1, -1, -1):
                if (rem >> j) & 1:
                    out[bitpos >> 3] |= 1 << (7 - (bitpos & 7))
                bitpos += 1
    return out_arr.tobytes()


def rice_decode(buf, Py_ssize_t count, int k):
    out_arr = np.empty(count, dtype=np.uint64)
    if count == 0:
        return out_arr
    cdef const uint8_t[::1] data = buf
    cdef uint64_t[::1] out = out_arr
    cdef int64_t nbits = data.shape[0] * 8
    cdef int64_t bitpos = 0
    cdef Py_ssize_t i
    cdef uint64_t q, rem
    cdef int j
    for i in range(count):
        q = 0
        while True:
            if bitpos >= nbits:
                raise ValueError("rice stream exhausted")
            if (data[bitpos >> 3] >> (7 - (bitpos & 7))) & 1:
                q += 1
                bitpos += 1
            else:
                bitpos += 1
                break
        if bitpos + k > nbits:
            raise ValueError("rice stream exhausted")
        rem = 0
        for j in range(k):
            rem = (rem << 1) | ((data[bitpos >> 3] >> (7 - (bitpos & 7))) & 1)
            bitpos += 1
        out[i] = (q << k) | rem
    return out_arr


def prefix_encode(symbols, lengths, codes):
    cdef uint32_t[::1] syms = np.ascontiguousarray(symbols, dtype=np.uint32)
    cdef uint8_t[::1] lens = np.ascontiguousarray(lengths, dtype=np.uint8)
    cdef uint64_t[::1] cds = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef Py_ssize_t n = syms.shape[0]
    if n == 0:
        return b""
    cdef Py_ssize_t i
    cdef int64_t total_bits = 0
    for i in range(n):
        total_bits += lens[syms[i]]
    out_arr = np.zeros((total_bits + 7) // 8, dtype=np.uint8)
    cdef uint8_t[::1] out = out_arr
    cdef int64_t bitpos = 0
    cdef uint64_t cd
    cdef int j, ln
    cdef uint32_t s
    for i in range(n):
        s = syms[i]
        ln = lens[s]
        cd = cds[s]
        for j in range(ln - 1, -1, -1):
            if (cd >> j) & 1:
                out[bitpos >> 3] |= 1 << (7 - (bitpos & 7))
            bitpos += 1
    return out_arr.tobytes()


def prefix_decode(buf, Py_ssize_t count, int max_len,
                  first_code, first_index, count_at, symbols_sorted):
    out_arr = np.empty(count, dtype=np.uint32)
    if count == 0:
        return out_arr
    cdef const uint8_t[::1] data = buf
    cdef uint64_t[::1] fc = np.ascontiguousarray(first_code, dtype=np.uint64)
    cdef int64_t[::1] fi = np.ascontiguousarray(first_index, dtype=np.int64)
    cdef int64_t[::1] ca = np.ascontiguousarray(count_at, dtype=np.int64)
    cdef uint32_t[::1] syms = np.ascontiguousarray(symbols_sorted, dtype=np.uint32)
    cdef uint32_t[::1] out = out_arr
    cdef int64_t nbits = data.shape[0] * 8
    cdef int64_t bitpos = 0, offset
    cdef Py_ssize_t i
    cdef uint64_t code
    cdef int length
    for i in range(count):
        code = 0
        length = 0
        while True:
            if bitpos >= nbits:
                raise ValueError("prefix stream exhausted")
            code = (code << 1) | ((data[bitpos >> 3] >> (7 - (bitpos & 7))) & 1)
            bitpos += 1
            length += 1
            if length > max_len:
                raise ValueError("invalid prefix code")
            offset = <int64_t> code - <int64_t> fc[length]
            if 0 <= offset < ca[length]:
                out[i] = syms[fi[length] + offset]
                break
    return out_arr
