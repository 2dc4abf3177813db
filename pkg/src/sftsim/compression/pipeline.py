"""Lossy stages of the activation compression pipeline.

Top-K sparsification keeps the K largest-magnitude entries of an activation
matrix; stochastic quantization maps each retained magnitude onto a uniform
grid between the smallest and largest retained magnitude, rounding randomly
so the result is unbiased. Both stages are deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ActivationTensor",
    "CompressionConfig",
    "QuantizationGrid",
    "SparseTensor",
    "grid_points",
    "quantize_stochastic",
    "topk_sparsify",
]


@dataclass(frozen=True)
class ActivationTensor:
    """A dense activation matrix (tokens x embedding dim)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size < 1:
            raise ValueError("activation tensor must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(arr)):
            raise ValueError("activation tensor must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CompressionConfig:
    """The tunable pair: keep rate (fraction of entries retained) and grid level count."""

    keep_rate: float
    levels: int

    def __post_init__(self) -> None:
        if not 0.0 < self.keep_rate <= 1.0:
            raise ValueError("keep_rate must be in (0, 1]")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


def grid_points(s_min: float, s_max: float, levels: int) -> np.ndarray:
    """Uniform magnitude grid Q_0..Q_E with Q_0 = s_min and Q_E = s_max exactly.

    Every producer and consumer of grid magnitudes must go through this
    helper so that encoded values compare bit-identically.
    """
    step = (s_max - s_min) / levels
    pts = s_min + np.arange(levels + 1, dtype=np.float64) * step
    pts[-1] = s_max
    return pts


@dataclass(frozen=True)
class QuantizationGrid:
    """Magnitude grid metadata: E intervals spanning [s_min, s_max]."""

    levels: int
    s_min: float
    s_max: float

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 <= self.s_min <= self.s_max:
            raise ValueError("need 0 <= s_min <= s_max")

    @property
    def points(self) -> np.ndarray:
        return grid_points(self.s_min, self.s_max, self.levels)


@dataclass(frozen=True)
class SparseTensor:
    """Sparse matrix as sorted flat indices plus the values at those positions.

    ``grid`` is attached by :func:`quantize_stochastic`; its presence marks
    the values as quantized (a precondition for grid-coded serialization).
    """

    shape: tuple[int, int]
    indices: np.ndarray
    values: np.ndarray
    grid: QuantizationGrid | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D and equal length")
        total = self.shape[0] * self.shape[1]
        if idx.size and (idx[0] < 0 or idx[-1] >= total or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be strictly increasing within the shape")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        m[self.indices] = True
        return m.reshape(self.shape)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.shape[0] * self.shape[1], dtype=np.float64)
        dense[self.indices] = self.values
        return dense.reshape(self.shape)


def _as_matrix(tensor: ActivationTensor | np.ndarray) -> np.ndarray:
    if isinstance(tensor, ActivationTensor):
        return tensor.values
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    return arr


def topk_sparsify(tensor: ActivationTensor | np.ndarray, keep_rate: float) -> SparseTensor:
    """Keep the K = round(keep_rate * size) largest-magnitude entries.

    Ties on the selection boundary are broken toward the smallest flat index,
    which makes the output deterministic.
    """
    if not 0.0 < keep_rate <= 1.0:
        raise ValueError("keep_rate must be in (0, 1]")
    mat = _as_matrix(tensor)
    flat = mat.ravel()
    total = flat.size
    k = int(round(keep_rate * total))
    if k == 0:
        raise ValueError("empty selection: keep_rate rounds to zero entries")

    mags = np.abs(flat)
    if k == total:
        idx = np.arange(total, dtype=np.int64)
    else:
        # Partition, then resolve boundary ties by smallest flat index.
        part = np.argpartition(mags, total - k)
        thresh = mags[part[total - k]]
        above = np.flatnonzero(mags > thresh)
        need = k - above.size
        if need > 0:
            at = np.flatnonzero(mags == thresh)[:need]
            idx = np.sort(np.concatenate([above, at]))
        else:
            idx = np.sort(above[:k])
        idx = idx.astype(np.int64)
    return SparseTensor(shape=mat.shape, indices=idx, values=flat[idx])


def quantize_stochastic(sparse: SparseTensor, levels: int, rng_seed) -> SparseTensor:
    """Unbiased randomized rounding of magnitudes onto the uniform grid.

    A magnitude inside interval [Q_e, Q_{e+1}] maps to Q_e with probability
    (Q_{e+1} - |s|) / (Q_{e+1} - Q_e), otherwise to Q_{e+1}; signs are kept.
    Magnitudes exactly on a grid point are returned unchanged. With a single
    distinct magnitude (s_min == s_max) the grid degenerates and every output
    equals that magnitude.
    """
    if sparse.nnz < 1:
        raise ValueError("need at least one retained entry to quantize")
    if levels < 1:
        raise ValueError("levels must be >= 1")

    mags = np.abs(sparse.values)
    signs = np.where(sparse.values < 0, -1.0, 1.0)
    s_min = float(mags.min())
    s_max = float(mags.max())
    grid = QuantizationGrid(levels=levels, s_min=s_min, s_max=s_max)

    if s_max == s_min:
        new_vals = signs * s_min
        return SparseTensor(sparse.shape, sparse.indices, new_vals, grid=grid)

    pts = grid.points
    step = (s_max - s_min) / levels
    cell = np.clip(((mags - s_min) / step).astype(np.int64), 0, levels - 1)
    lo = pts[cell]
    hi = pts[cell + 1]
    p_up = (mags - lo) / (hi - lo)
    rng = np.random.default_rng(rng_seed)
    sym = cell + (rng.random(mags.shape[0]) < p_up)
    new_vals = signs * pts[sym]
    return SparseTensor(sparse.shape, sparse.indices, new_vals, grid=grid)
