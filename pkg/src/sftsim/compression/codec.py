"""Lossless serialization of sparse quantized tensors.

Blob layout (all integers little-endian):

    magic   4 bytes  b"SFTC"
    version 1 byte   (currently 1)
    rows    uint32
    cols    uint32
    levels  uint16   E of the quantization grid; 0 = raw float32 values
    s_min   float64
    s_max   float64
    hist    uint32 entry count, then (symbol uint32, count uint64) per entry
    mask_stream   uint32 byte length + Rice-coded zero-run lengths
    sign_stream   uint32 byte length + raw sign bits (1 = negative)
    value_stream  uint32 byte length + canonical-prefix-coded grid indices
                  (raw little-endian float32 values when levels == 0)

The mask is stored as nnz+1 zero-run lengths in flat row-major order: zeros
before the first kept entry, between consecutive kept entries, and after the
last one (an empty tensor is a single full-length run). The Rice parameter is
recomputed from the keep rate on both sides, so it is not stored. The value
histogram doubles as the prefix-code specification: both sides rebuild the
same canonical code from it.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from sftsim.compression import kernels
from sftsim.compression.pipeline import QuantizationGrid, SparseTensor, grid_points

__all__ = [
    "CodecError",
    "CompressedBlob",
    "compression_ratio",
    "decode",
    "encode",
    "naive_sparse_bits",
    "rice_parameter",
]

MAGIC = b"SFTC"
VERSION = 1
RAW_LEVELS = 0  # sentinel in the levels field: values stored as raw float32
_MAX_RICE_K = 48
_HEADER = struct.Struct("<4sBIIHdd")


class CodecError(ValueError):
    """Raised for malformed input on either side of the codec."""


@dataclass(frozen=True)
class CompressedBlob:
    """Decoded-header view of one encoded tensor plus its three bit streams."""

    rows: int
    cols: int
    levels: int
    s_min: float
    s_max: float
    histogram: tuple[tuple[int, int], ...]  # (symbol, count), sorted by symbol
    mask_stream: bytes
    sign_stream: bytes
    value_stream: bytes

    @property
    def nnz(self) -> int:
        if self.levels == RAW_LEVELS:
            return len(self.value_stream) // 4
        return sum(count for _, count in self.histogram)

    @property
    def num_bytes(self) -> int:
        return (
            _HEADER.size
            + 4
            + 12 * len(self.histogram)
            + 12
            + len(self.mask_stream)
            + len(self.sign_stream)
            + len(self.value_stream)
        )

    @property
    def num_bits(self) -> int:
        return 8 * self.num_bytes

    @property
    def header_bytes(self) -> int:
        """Framing overhead: everything except the three payload streams."""
        return self.num_bytes - len(self.mask_stream) - len(self.sign_stream) - len(self.value_stream)

    def to_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(MAGIC, VERSION, self.rows, self.cols, self.levels, self.s_min, self.s_max),
            struct.pack("<I", len(self.histogram)),
        ]
        for symbol, count in self.histogram:
            parts.append(struct.pack("<IQ", symbol, count))
        for stream in (self.mask_stream, self.sign_stream, self.value_stream):
            parts.append(struct.pack("<I", len(stream)))
            parts.append(stream)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedBlob":
        if len(data) < _HEADER.size + 4:
            raise CodecError("decode failure: blob shorter than header")
        magic, version, rows, cols, levels, s_min, s_max = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CodecError("decode failure: bad magic")
        if version != VERSION:
            raise CodecError(f"decode failure: unsupported version {version}")
        pos = _HEADER.size
        (hist_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if len(data) < pos + 12 * hist_len:
            raise CodecError("decode failure: truncated histogram")
        histogram = []
        for _ in range(hist_len):
            symbol, count = struct.unpack_from("<IQ", data, pos)
            histogram.append((symbol, count))
            pos += 12
        streams = []
        for _ in range(3):
            if len(data) < pos + 4:
                raise CodecError("decode failure: truncated stream header")
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if len(data) < pos + length:
                raise CodecError("decode failure: truncated stream")
            streams.append(data[pos : pos + length])
            pos += length
        if pos != len(data):
            raise CodecError("decode failure: trailing bytes")
        return cls(rows, cols, levels, s_min, s_max, tuple(histogram), *streams)


def rice_parameter(nnz: int, total: int) -> int:
    """Rice parameter for geometric zero-run lengths at the empirical keep rate.

    M = 2^ceil(log2(ln 2 / -ln(1 - rho))), clamped to M >= 1; the keep rate is
    nudged off 0 and 1 so the expression stays defined for degenerate masks.
    """
    if total <= 0:
        return 0
    rho = min(max(nnz / total, 0.5 / total), 1.0 - 0.5 / total)
    mean_ratio = math.log(2.0) / -math.log1p(-rho)
    k = math.ceil(math.log2(mean_ratio))
    return min(max(k, 0), _MAX_RICE_K)


def _canonical_code(symbols: np.ndarray, counts: np.ndarray):
    """Build the canonical prefix code for >= 2 symbols.

    Huffman code lengths with deterministic tie-breaking, then canonical code
    assignment ordered by (length, symbol). Returns (lengths_by_symbol,
    codes_by_symbol, decode_tables) where the dense arrays are indexed by raw
    symbol value.
    """
    order = np.argsort(symbols)
    symbols = symbols[order]
    counts = counts[order]
    n = symbols.shape[0]

    # Huffman: merge the two lightest subtrees; the serial number makes
    # tie-breaking (and therefore the code) deterministic.
    heap = [(int(c), i, [i]) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    serial = n
    depth = np.zeros(n, dtype=np.int64)
    while len(heap) > 1:
        c1, _, leaves1 = heapq.heappop(heap)
        c2, _, leaves2 = heapq.heappop(heap)
        merged = leaves1 + leaves2
        depth[merged] += 1
        heapq.heappush(heap, (c1 + c2, serial, merged))
        serial += 1

    max_len = int(depth.max())
    if max_len > 57:
        raise CodecError("prefix code depth exceeds 57 bits")

    # Canonical assignment: sort by (length, symbol), codes count upward.
    max_symbol = int(symbols[-1])
    lengths = np.zeros(max_symbol + 1, dtype=np.uint8)
    lengths[symbols] = depth
    codes = np.zeros(max_symbol + 1, dtype=np.uint64)

    by_len_sym = np.lexsort((symbols, depth))
    first_code = np.zeros(max_len + 1, dtype=np.uint64)
    first_index = np.zeros(max_len + 1, dtype=np.int64)
    count_at = np.zeros(max_len + 1, dtype=np.int64)
    code = 0
    prev_len = 0
    for rank, j in enumerate(by_len_sym):
        length = int(depth[j])
        code <<= length - prev_len
        if count_at[length] == 0:
            first_code[length] = code
            first_index[length] = rank
        count_at[length] += 1
        codes[symbols[j]] = code
        code += 1
        prev_len = length
    symbols_sorted = symbols[by_len_sym].astype(np.uint32)
    tables = (max_len, first_code, first_index, count_at, symbols_sorted)
    return lengths, codes, tables


def _mask_runs(indices: np.ndarray, total: int) -> np.ndarray:
    nnz = indices.shape[0]
    runs = np.empty(nnz + 1, dtype=np.uint64)
    if nnz == 0:
        runs[0] = total
        return runs
    runs[0] = indices[0]
    runs[1:nnz] = indices[1:] - indices[:-1] - 1
    runs[nnz] = total - 1 - int(indices[-1])
    return runs


def encode(sparse: SparseTensor) -> CompressedBlob:
    """Serialize a sparse tensor losslessly.

    Quantized tensors (``sparse.grid`` set) store grid indices under a
    canonical prefix code; unquantized tensors are stored with raw float32
    values (levels field 0). Values that are not exactly on the declared grid
    raise ``CodecError("unquantized input")``.
    """
    rows, cols = sparse.shape
    total = rows * cols
    nnz = sparse.nnz
    runs = _mask_runs(sparse.indices, total)
    mask_stream = kernels.rice_encode(runs, rice_parameter(nnz, total))
    sign_stream = np.packbits(sparse.values < 0).tobytes() if nnz else b""

    grid = sparse.grid
    if grid is None:
        value_stream = sparse.values.astype("<f4").tobytes()
        return CompressedBlob(rows, cols, RAW_LEVELS, 0.0, 0.0, (), mask_stream, sign_stream, value_stream)

    if nnz == 0:
        return CompressedBlob(
            rows, cols, grid.levels, grid.s_min, grid.s_max, (), mask_stream, b"", b""
        )

    pts = grid.points
    mags = np.abs(sparse.values)
    if grid.s_max > grid.s_min:
        step = (grid.s_max - grid.s_min) / grid.levels
        syms = np.clip(np.rint((mags - grid.s_min) / step).astype(np.int64), 0, grid.levels)
    else:
        syms = np.zeros(nnz, dtype=np.int64)
    if not np.array_equal(pts[syms], mags):
        raise CodecError("unquantized input: values are not on the declared grid")

    present, counts = np.unique(syms, return_counts=True)
    histogram = tuple((int(s), int(c)) for s, c in zip(present, counts))
    if present.shape[0] == 1:
        value_stream = b""  # single grid index: implied by the histogram
    else:
        lengths, codes, _ = _canonical_code(present, counts)
        value_stream = kernels.prefix_encode(syms.astype(np.uint32), lengths, codes)
    return CompressedBlob(
        rows, cols, grid.levels, grid.s_min, grid.s_max, histogram, mask_stream, sign_stream, value_stream
    )


def decode(blob: CompressedBlob | bytes) -> SparseTensor:
    """Exact inverse of :func:`encode`; raises ``CodecError`` on any corruption."""
    if isinstance(blob, (bytes, bytearray, memoryview)):
        blob = CompressedBlob.from_bytes(bytes(blob))
    rows, cols = blob.rows, blob.cols
    total = rows * cols
    if rows < 1 or cols < 1:
        raise CodecError("decode failure: empty shape")
    nnz = blob.nnz
    if nnz > total:
        raise CodecError("decode failure: more entries than the shape holds")

    try:
        runs = kernels.rice_decode(blob.mask_stream, nnz + 1, rice_parameter(nnz, total))
    except ValueError as exc:
        raise CodecError(f"decode failure: {exc}") from exc
    if int(runs.sum()) + nnz != total:
        raise CodecError("decode failure: mask runs do not cover the shape")
    indices = (np.cumsum(runs[:nnz].astype(np.int64) + 1) - 1) if nnz else np.empty(0, dtype=np.int64)

    if len(blob.sign_stream) != (nnz + 7) // 8:
        raise CodecError("decode failure: sign stream length mismatch")
    negative = np.unpackbits(np.frombuffer(blob.sign_stream, dtype=np.uint8), count=nnz).astype(bool) \
        if nnz else np.empty(0, dtype=bool)
    signs = np.where(negative, -1.0, 1.0)

    if blob.levels == RAW_LEVELS:
        if len(blob.value_stream) != 4 * nnz:
            raise CodecError("decode failure: raw value stream length mismatch")
        vals = np.frombuffer(blob.value_stream, dtype="<f4").astype(np.float64)
        # Raw mode stores signed values directly; the sign stream is advisory.
        return _build_sparse((rows, cols), indices, vals, None)

    if nnz == 0:
        return _build_sparse((rows, cols), indices, np.empty(0, dtype=np.float64), None)

    for symbol, count in blob.histogram:
        if symbol > blob.levels or count < 1:
            raise CodecError("decode failure: invalid histogram entry")
    present = np.array([s for s, _ in blob.histogram], dtype=np.int64)
    counts = np.array([c for _, c in blob.histogram], dtype=np.int64)
    if np.any(np.diff(present) <= 0):
        raise CodecError("decode failure: histogram not sorted")

    if present.shape[0] == 1:
        if blob.value_stream:
            raise CodecError("decode failure: unexpected value stream")
        syms = np.full(nnz, present[0], dtype=np.int64)
    else:
        _, _, tables = _canonical_code(present, counts)
        max_len, first_code, first_index, count_at, symbols_sorted = tables
        try:
            syms = kernels.prefix_decode(
                blob.value_stream, nnz, max_len, first_code, first_index, count_at, symbols_sorted
            ).astype(np.int64)
        except ValueError as exc:
            raise CodecError(f"decode failure: {exc}") from exc

    try:
        grid = QuantizationGrid(blob.levels, blob.s_min, blob.s_max)
    except ValueError as exc:
        raise CodecError(f"decode failure: {exc}") from exc
    mags = grid_points(blob.s_min, blob.s_max, blob.levels)[syms]
    return _build_sparse((rows, cols), indices, signs * mags, grid)


def _build_sparse(shape, indices, values, grid) -> SparseTensor:
    try:
        return SparseTensor(shape, indices, values, grid=grid)
    except ValueError as exc:
        raise CodecError(f"decode failure: {exc}") from exc


def compression_ratio(blob: CompressedBlob, rows: int, cols: int, bytes_per_param: int = 4) -> float:
    """Transmitted fraction: blob bits over the uncompressed tensor bits."""
    uncompressed_bits = rows * cols * 8 * bytes_per_param
    if uncompressed_bits <= 0:
        raise ValueError("original tensor must be non-empty")
    return blob.num_bits / uncompressed_bits


def naive_sparse_bits(nnz: int) -> int:
    """Baseline sparse layout: 32-bit value plus 32-bit flat index per entry."""
    return 64 * nnz
