"""Pure-Python bitstream kernels (fallback backend).

Same contract as the compiled twin in ``_kernels_cy``: Rice-coded
non-negative integers and canonical-prefix-coded symbols, MSB-first within
each byte, zero-padded to a byte boundary. Outputs are bit-exact across
backends; the compiled version only changes speed.

Encoding is vectorised with numpy. Decoding is inherently sequential, so the
fallback walks the stream with per-symbol numpy lookups; expect it to be one
to two orders of magnitude slower than the compiled backend on large inputs.
"""

from __future__ import annotations

import numpy as np


def rice_encode(values: np.ndarray, k: int) -> bytes:
    """Rice-code non-negative integers: unary quotient, terminator 0, k-bit remainder."""
    values = np.ascontiguousarray(values, dtype=np.uint64)
    n = values.shape[0]
    if n == 0:
        return b""
    q = (values >> np.uint64(k)).astype(np.int64)
    total_bits = int(q.sum()) + n * (1 + k)
    padded = ((total_bits + 7) // 8) * 8

    start = np.zeros(n, dtype=np.int64)
    np.cumsum(q[:-1] + 1 + k, out=start[1:])

    # Unary runs of ones via a difference array; terminators/pad stay zero.
    delta = np.bincount(start, minlength=padded + 1).astype(np.int64)
    delta -= np.bincount(start + q, minlength=padded + 1).astype(np.int64)
    bits = (np.cumsum(delta[:-1]) > 0).astype(np.uint8)

    if k > 0:
        shifts = np.arange(k - 1, -1, -1, dtype=np.uint64)
        rem_bits = ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
        pos = (start + q + 1)[:, None] + np.arange(k, dtype=np.int64)[None, :]
        bits[pos.ravel()] = rem_bits.ravel()
    return np.packbits(bits).tobytes()


def rice_decode(buf: bytes, count: int, k: int) -> np.ndarray:
    """Decode exactly ``count`` Rice-coded values; raises ValueError on overrun."""
    if count == 0:
        return np.empty(0, dtype=np.uint64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))
    nbits = bits.shape[0]
    zero_pos = np.flatnonzero(bits == 0)
    terms = np.empty(count, dtype=np.int64)
    pos = 0
    for i in range(count):
        zi = np.searchsorted(zero_pos, pos, side="left")
        if zi >= zero_pos.shape[0]:
            raise ValueError("rice stream exhausted")
        t = int(zero_pos[zi])
        terms[i] = t
        pos = t + 1 + k
    if pos > nbits:
        raise ValueError("rice stream exhausted")

    starts = np.empty(count, dtype=np.int64)
    starts[0] = 0
    starts[1:] = terms[:-1] + 1 + k
    q = (terms - starts).astype(np.uint64)
    if k == 0:
        return q
    rem_pos = terms[:, None] + 1 + np.arange(k, dtype=np.int64)[None, :]
    rem_bits = bits[rem_pos].astype(np.uint64)
    weights = np.uint64(1) << np.arange(k - 1, -1, -1, dtype=np.uint64)
    rem = rem_bits @ weights
    return (q << np.uint64(k)) | rem


def prefix_encode(symbols: np.ndarray, lengths: np.ndarray, codes: np.ndarray) -> bytes:
    """Emit the canonical code of each symbol; ``lengths``/``codes`` are indexed by symbol."""
    symbols = np.ascontiguousarray(symbols, dtype=np.uint32)
    n = symbols.shape[0]
    if n == 0:
        return b""
    lens = lengths[symbols].astype(np.int64)
    cds = codes[symbols].astype(np.uint64)
    total_bits = int(lens.sum())
    padded = ((total_bits + 7) // 8) * 8
    offs = np.zeros(n, dtype=np.int64)
    np.cumsum(lens[:-1], out=offs[1:])

    bits = np.zeros(padded, dtype=np.uint8)
    max_len = int(lens.max())
    for j in range(max_len):
        sel = lens > j
        shift = (lens[sel] - 1 - j).astype(np.uint64)
        bits[offs[sel] + j] = ((cds[sel] >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits).tobytes()


def prefix_decode(
    buf: bytes,
    count: int,
    max_len: int,
    first_code: np.ndarray,
    first_index: np.ndarray,
    count_at: np.ndarray,
    symbols_sorted: np.ndarray,
) -> np.ndarray:
    """Decode ``count`` symbols using canonical-code tables (one entry per code length)."""
    if count == 0:
        return np.empty(0, dtype=np.uint32)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8)).tolist()
    nbits = len(bits)
    out = np.empty(count, dtype=np.uint32)
    fc = first_code.tolist()
    fi = first_index.tolist()
    ca = count_at.tolist()
    syms = symbols_sorted
    pos = 0
    for i in range(count):
        code = 0
        length = 0
        while True:
            if pos >= nbits:
                raise ValueError("prefix stream exhausted")
            code = (code << 1) | bits[pos]
            pos += 1
            length += 1
            if length > max_len:
                raise ValueError("invalid prefix code")
            offset = code - fc[length]
            if 0 <= offset < ca[length]:
                out[i] = syms[fi[length] + offset]
                break
    return out
