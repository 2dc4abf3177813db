"""Benchmark: compiled vs pure-Python bitstream kernels.

Runs the full compression pipeline on a production-size activation tensor
(batch 64 x 197 tokens x 768 dims) and times the lossless coding stage under
both backends. The lossy stages (top-K, quantization) are numpy-vectorized
and identical for both.

Usage: python benchmarks/bench_codec.py [--rows N] [--cols N] [--repeat K]
"""

import argparse
import time

import numpy as np

from sftsim.compression import _kernels_py, codec, kernels
from sftsim.compression.pipeline import quantize_stochastic, topk_sparsify

try:
    from sftsim.compression import _kernels_cy
except ImportError:
    _kernels_cy = None


def run_backend(backend, name, quantized, rows, cols, repeat):
    saved = (kernels.rice_encode, kernels.rice_decode,
             kernels.prefix_encode, kernels.prefix_decode)
    kernels.rice_encode = backend.rice_encode
    kernels.rice_decode = backend.rice_decode
    kernels.prefix_encode = backend.prefix_encode
    kernels.prefix_decode = backend.prefix_decode
    try:
        enc_times, dec_times = [], []
        blob = None
        for _ in range(repeat):
            t0 = time.perf_counter()
            blob = codec.encode(quantized)
            t1 = time.perf_counter()
            decoded = codec.decode(blob)
            t2 = time.perf_counter()
            enc_times.append(t1 - t0)
            dec_times.append(t2 - t1)
            assert np.array_equal(decoded.values, quantized.values)
        beta = codec.compression_ratio(blob, rows, cols)
        print(f"{name:>10}: encode {min(enc_times)*1e3:9.1f} ms   "
              f"decode {min(dec_times)*1e3:9.1f} ms   "
              f"blob {blob.num_bytes/1e6:.2f} MB   1/beta {1/beta:.1f}")
        return min(enc_times), min(dec_times)
    finally:
        (kernels.rice_encode, kernels.rice_decode,
         kernels.prefix_encode, kernels.prefix_decode) = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=64 * 197)
    parser.add_argument("--cols", type=int, default=768)
    parser.add_argument("--keep-rate", type=float, default=0.2)
    parser.add_argument("--levels", type=int, default=8)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    tensor = rng.standard_normal((args.rows, args.cols))
    print(f"tensor {args.rows}x{args.cols}, keep_rate={args.keep_rate}, "
          f"levels={args.levels}, active backend: {kernels.BACKEND}")

    t0 = time.perf_counter()
    sparse = topk_sparsify(tensor, args.keep_rate)
    t1 = time.perf_counter()
    quantized = quantize_stochastic(sparse, args.levels, rng_seed=1)
    t2 = time.perf_counter()
    print(f"  shared lossy stages: top-k {1e3*(t1-t0):.1f} ms, "
          f"quantize {1e3*(t2-t1):.1f} ms, nnz {sparse.nnz}")

    results = {}
    if _kernels_cy is not None:
        results["compiled"] = run_backend(_kernels_cy, "compiled", quantized,
                                          args.rows, args.cols, args.repeat)
    else:
        print("  compiled backend unavailable (extension not built)")
    results["python"] = run_backend(_kernels_py, "python", quantized,
                                    args.rows, args.cols, args.repeat)

    if len(results) == 2:
        enc_speedup = results["python"][0] / results["compiled"][0]
        dec_speedup = results["python"][1] / results["compiled"][1]
        print(f"  speedup: encode {enc_speedup:.1f}x, decode {dec_speedup:.1f}x")


if __name__ == "__main__":
    main()
