"""Lossless codec tests: framing, round trips, fuzzing, backend equivalence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sftsim.compression import _kernels_py
from sftsim.compression.codec import (
    CodecError,
    CompressedBlob,
    compression_ratio,
    decode,
    encode,
    naive_sparse_bits,
    rice_parameter,
)
from sftsim.compression.kernels import BACKEND
from sftsim.compression.pipeline import SparseTensor, quantize_stochastic, topk_sparsify

try:
    from sftsim.compression import _kernels_cy
except ImportError:  # pragma: no cover - exercised only without the extension
    _kernels_cy = None


def roundtrip(sparse: SparseTensor) -> SparseTensor:
    return decode(encode(sparse).to_bytes())


def random_quantized(rng, shape=(20, 15), keep_rate=0.4, levels=8):
    mat = rng.standard_normal(shape)
    sparse = topk_sparsify(mat, keep_rate)
    return quantize_stochastic(sparse, levels, rng_seed=int(rng.integers(2**31)))


class TestFraming:
    def test_roundtrip_preserves_everything(self):
        rng = np.random.default_rng(0)
        q = random_quantized(rng)
        back = roundtrip(q)
        assert back.shape == q.shape
        assert np.array_equal(back.indices, q.indices)
        assert np.array_equal(back.values, q.values)
        assert back.grid.levels == q.grid.levels

    def test_all_zero_mask_single_run(self):
        sparse = SparseTensor((6, 7), np.empty(0, dtype=np.int64), np.empty(0),
                              grid=None)
        blob = encode(sparse)
        # One Rice-coded run covering the whole tensor, no value payload.
        runs = _kernels_py.rice_decode(blob.mask_stream, 1, rice_parameter(0, 42))
        assert list(runs) == [42]
        assert blob.value_stream == b""
        back = decode(blob)
        assert back.nnz == 0 and back.shape == (6, 7)

    def test_header_only_blob_empty_tensor(self):
        sparse = SparseTensor((3, 4), np.empty(0, dtype=np.int64), np.empty(0))
        back = roundtrip(sparse)
        assert back.shape == (3, 4)
        assert back.nnz == 0
        assert np.array_equal(back.to_dense(), np.zeros((3, 4)))

    def test_unquantized_values_rejected_when_grid_declared(self):
        from sftsim.compression.pipeline import QuantizationGrid

        bad = SparseTensor((1, 3), np.arange(3), np.array([0.1, 0.5, 1.0]),
                           grid=QuantizationGrid(4, 0.1, 1.0))
        with pytest.raises(CodecError, match="unquantized input"):
            encode(bad)

    def test_raw_mode_roundtrip(self):
        rng = np.random.default_rng(1)
        mat = rng.standard_normal((9, 11)).astype(np.float32).astype(np.float64)
        sparse = topk_sparsify(mat, 0.5)
        back = roundtrip(sparse)
        assert np.array_equal(back.to_dense(), sparse.to_dense())

    def test_trailing_garbage_rejected(self):
        rng = np.random.default_rng(2)
        data = encode(random_quantized(rng)).to_bytes()
        with pytest.raises(CodecError):
            decode(data + b"\x00")

    def test_bad_magic_rejected(self):
        rng = np.random.default_rng(3)
        data = bytearray(encode(random_quantized(rng)).to_bytes())
        data[0] ^= 0xFF
        with pytest.raises(CodecError, match="magic"):
            decode(bytes(data))


class TestRoundTripsAtScale:
    def test_thousand_random_roundtrips(self):
        rng = np.random.default_rng(10)
        for i in range(1000):
            rows = int(rng.integers(1, 40))
            cols = int(rng.integers(1, 40))
            keep = float(rng.uniform(0.02, 1.0))
            levels = int(rng.integers(1, 64))
            mat = rng.standard_normal((rows, cols))
            sparse = topk_sparsify(mat, keep) if round(keep * rows * cols) >= 1 else None
            if sparse is None:
                continue
            if i % 3 != 0:
                sparse = quantize_stochastic(sparse, levels, rng_seed=i)
            back = roundtrip(sparse)
            assert np.array_equal(back.indices, sparse.indices)
            if sparse.grid is not None:
                assert np.array_equal(back.values, sparse.values)
            else:
                assert np.array_equal(back.values,
                                      sparse.values.astype(np.float32).astype(np.float64))

    def test_thousand_truncations_fail_cleanly(self):
        rng = np.random.default_rng(11)
        blobs = [encode(random_quantized(rng, shape=(12, 9))).to_bytes() for _ in range(25)]
        attempts = 0
        while attempts < 1000:
            data = blobs[attempts % len(blobs)]
            cut = int(rng.integers(0, len(data)))
            attempts += 1
            with pytest.raises(CodecError):
                decode(data[:cut])


class TestCompressionRatio:
    def test_noop_near_unity(self):
        # Keep everything, raw float values: the blob cannot be materially
        # smaller than the tensor, and exceeds it only by framing overhead.
        rng = np.random.default_rng(12)
        mat = rng.standard_normal((64, 64)).astype(np.float32).astype(np.float64)
        sparse = topk_sparsify(mat, 1.0)
        blob = encode(sparse)
        beta = compression_ratio(blob, 64, 64)
        overhead = blob.header_bytes * 8 / (64 * 64 * 32)
        assert 0.9 <= beta <= 1.0 + overhead + 0.1

    def test_gaussian_config_compresses_hard(self):
        rng = np.random.default_rng(13)
        mat = rng.standard_normal((256, 128))
        q = quantize_stochastic(topk_sparsify(mat, 0.2), 8, rng_seed=5)
        blob = encode(q)
        beta = compression_ratio(blob, 256, 128)
        assert beta <= 1 / 15
        assert naive_sparse_bits(q.nnz) / blob.num_bits >= 1.4

    def test_beta_monotone_in_keep_rate(self):
        rng = np.random.default_rng(14)
        mat = rng.standard_normal((128, 128))
        betas = []
        for rho in (0.05, 0.1, 0.2, 0.4, 0.8, 1.0):
            q = quantize_stochastic(topk_sparsify(mat, rho), 8, rng_seed=6)
            betas.append(compression_ratio(encode(q), 128, 128))
        assert all(a <= b + 1e-12 for a, b in zip(betas, betas[1:]))


class TestRiceParameter:
    def test_degenerate_rates_defined(self):
        assert rice_parameter(0, 100) >= 0
        assert rice_parameter(100, 100) == 0
        assert rice_parameter(0, 0) == 0

    def test_sparser_masks_get_larger_parameter(self):
        ks = [rice_parameter(n, 10_000) for n in (5000, 1000, 100, 10)]
        assert all(a <= b for a, b in zip(ks, ks[1:]))


@pytest.mark.skipif(_kernels_cy is None, reason="compiled kernels unavailable")
class TestBackendEquivalence:
    """The compiled and pure-Python kernels must agree bit for bit."""

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 50_000), min_size=0, max_size=200), st.integers(0, 20))
    def test_rice_streams_identical(self, values, k):
        vals = np.array(values, dtype=np.uint64)
        enc_py = _kernels_py.rice_encode(vals, k)
        enc_cy = _kernels_cy.rice_encode(vals, k)
        assert enc_py == enc_cy
        if len(values):
            dec_py = _kernels_py.rice_decode(enc_py, len(values), k)
            dec_cy = _kernels_cy.rice_decode(enc_py, len(values), k)
            assert np.array_equal(dec_py, vals)
            assert np.array_equal(dec_cy, vals)

    def test_rice_large_values_with_adequate_parameter(self):
        vals = np.array([2**40, 2**40 + 12345, 0, 7], dtype=np.uint64)
        for k in (30, 40):
            enc_py = _kernels_py.rice_encode(vals, k)
            assert enc_py == _kernels_cy.rice_encode(vals, k)
            assert np.array_equal(_kernels_cy.rice_decode(enc_py, 4, k), vals)
            assert np.array_equal(_kernels_py.rice_decode(enc_py, 4, k), vals)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_prefix_streams_identical(self, data):
        from sftsim.compression.codec import _canonical_code

        num_symbols = data.draw(st.integers(2, 24))
        counts = np.array(
            data.draw(
                st.lists(st.integers(1, 10_000), min_size=num_symbols, max_size=num_symbols)
            ),
            dtype=np.int64,
        )
        symbols = np.arange(num_symbols, dtype=np.int64)
        lengths, codes, tables = _canonical_code(symbols, counts)
        max_len, first_code, first_index, count_at, symbols_sorted = tables
        message = np.array(
            data.draw(st.lists(st.integers(0, num_symbols - 1), min_size=1, max_size=500)),
            dtype=np.uint32,
        )
        enc_py = _kernels_py.prefix_encode(message, lengths, codes)
        enc_cy = _kernels_cy.prefix_encode(message, lengths, codes)
        assert enc_py == enc_cy
        dec_py = _kernels_py.prefix_decode(
            enc_py, len(message), max_len, first_code, first_index, count_at, symbols_sorted
        )
        dec_cy = _kernels_cy.prefix_decode(
            enc_py, len(message), max_len, first_code, first_index, count_at, symbols_sorted
        )
        assert np.array_equal(dec_py, message)
        assert np.array_equal(dec_cy, message)

    def test_active_backend_matches_environment(self):
        import os

        requested = os.environ.get("SFTSIM_BACKEND", "").strip().lower()
        assert BACKEND == ("python" if requested == "python" else "compiled")


def test_rice_decode_overrun_raises():
    enc = _kernels_py.rice_encode(np.array([3, 1, 4], dtype=np.uint64), 1)
    with pytest.raises(ValueError):
        _kernels_py.rice_decode(enc, 50, 1)
