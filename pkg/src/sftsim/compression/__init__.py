"""Activation compression: Top-K sparsification, stochastic quantization,
lossless coding, and the fitted rate/accuracy surrogates."""

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
from sftsim.compression.pipeline import (
    ActivationTensor,
    CompressionConfig,
    QuantizationGrid,
    SparseTensor,
    grid_points,
    quantize_stochastic,
    topk_sparsify,
)
from sftsim.compression.surrogate import (
    AccuracySurface,
    RatePredictor,
    calibrate_predictor,
    fit_accuracy_surface,
    measure_rate_grid,
    synthetic_accuracy,
    synthetic_accuracy_observations,
)

__all__ = [
    "ActivationTensor",
    "AccuracySurface",
    "BACKEND",
    "CodecError",
    "CompressedBlob",
    "CompressionConfig",
    "QuantizationGrid",
    "RatePredictor",
    "SparseTensor",
    "calibrate_predictor",
    "compression_ratio",
    "decode",
    "encode",
    "fit_accuracy_surface",
    "grid_points",
    "measure_rate_grid",
    "naive_sparse_bits",
    "quantize_stochastic",
    "rice_parameter",
    "synthetic_accuracy",
    "synthetic_accuracy_observations",
    "topk_sparsify",
]
