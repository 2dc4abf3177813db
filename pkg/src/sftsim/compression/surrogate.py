"""Data-driven surrogates used by the planner.

Two fitted maps over the compression configuration (keep rate, levels):

* :class:`RatePredictor` - piecewise-bilinear interpolation of measured
  transmitted fractions on a rectangular calibration grid.
* :class:`AccuracySurface` - least-squares cubic polynomial relating the
  configuration to task accuracy (percentage points).

Real fine-tuning accuracy measurements are out of scope; a synthetic
generator with the qualitative shape of measured curves (flat plateau, drop
that steepens sharply once ~90% of entries are discarded, mild gain from
finer quantization grids) stands in for calibration data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from sftsim.compression.codec import compression_ratio, encode
from sftsim.compression.pipeline import quantize_stochastic, topk_sparsify

__all__ = [
    "AccuracySurface",
    "CUBIC_TERMS",
    "RatePredictor",
    "calibrate_predictor",
    "fit_accuracy_surface",
    "load_accuracy_csv",
    "measure_rate_grid",
    "synthetic_accuracy",
    "synthetic_accuracy_observations",
]

# Exponent pairs (i, j) of the cubic surface terms rho^i * E^j, i + j <= 3.
CUBIC_TERMS: tuple[tuple[int, int], ...] = (
    (0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3),
)


@dataclass(frozen=True)
class RatePredictor:
    """Bilinear interpolant of the measured transmitted fraction beta(rho, E)."""

    rho_grid: np.ndarray
    level_grid: np.ndarray
    beta: np.ndarray  # shape (len(rho_grid), len(level_grid))

    def predict(self, rho, levels):
        rho = np.asarray(rho, dtype=np.float64)
        lev = np.asarray(levels, dtype=np.float64)
        r = np.clip(rho, self.rho_grid[0], self.rho_grid[-1])
        e = np.clip(lev, self.level_grid[0], self.level_grid[-1])
        i = np.clip(np.searchsorted(self.rho_grid, r, side="right") - 1, 0, len(self.rho_grid) - 2)
        j = np.clip(np.searchsorted(self.level_grid, e, side="right") - 1, 0, len(self.level_grid) - 2)
        tr = (r - self.rho_grid[i]) / (self.rho_grid[i + 1] - self.rho_grid[i])
        te = (e - self.level_grid[j]) / (self.level_grid[j + 1] - self.level_grid[j])
        b = self.beta
        val = (
            (1 - tr) * (1 - te) * b[i, j]
            + tr * (1 - te) * b[i + 1, j]
            + (1 - tr) * te * b[i, j + 1]
            + tr * te * b[i + 1, j + 1]
        )
        return float(val) if val.ndim == 0 else val

    def to_dict(self) -> dict:
        return {
            "rho_grid": self.rho_grid.tolist(),
            "level_grid": self.level_grid.tolist(),
            "beta": self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RatePredictor":
        return cls(
            rho_grid=np.asarray(payload["rho_grid"], dtype=np.float64),
            level_grid=np.asarray(payload["level_grid"], dtype=np.float64),
            beta=np.asarray(payload["beta"], dtype=np.float64),
        )


def calibrate_predictor(samples) -> RatePredictor:
    """Build the bilinear predictor from ((rho, levels), beta) measurements.

    The samples must cover a full rectangular grid with at least two points
    per axis; duplicated grid points must agree on beta.
    """
    seen: dict[tuple[float, float], float] = {}
    for (rho, lev), beta in samples:
        key = (float(rho), float(lev))
        if key in seen and not math.isclose(seen[key], float(beta), rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(f"conflicting beta measurements at rho={key[0]}, levels={key[1]}")
        seen[key] = float(beta)

    rhos = np.array(sorted({k[0] for k in seen}), dtype=np.float64)
    levels = np.array(sorted({k[1] for k in seen}), dtype=np.float64)
    if len(rhos) < 2 or len(levels) < 2:
        raise ValueError("need at least a 2x2 calibration grid")
    beta = np.empty((len(rhos), len(levels)), dtype=np.float64)
    for i, r in enumerate(rhos):
        for j, e in enumerate(levels):
            key = (float(r), float(e))
            if key not in seen:
                raise ValueError(f"calibration grid is not rectangular: missing rho={r}, levels={e}")
            beta[i, j] = seen[key]
    return RatePredictor(rho_grid=rhos, level_grid=levels, beta=beta)


def measure_rate_grid(rhos, level_values, shape=(256, 256), seed=0, bytes_per_param=4):
    """Measure beta on Gaussian tensors for every (rho, levels) grid point."""
    rng = np.random.default_rng(seed)
    tensor = rng.standard_normal(shape)
    samples = []
    for rho in rhos:
        sparse = topk_sparsify(tensor, float(rho))
        for lev in level_values:
            quantized = quantize_stochastic(sparse, int(lev), rng_seed=(seed, int(lev)))
            blob = encode(quantized)
            beta = compression_ratio(blob, shape[0], shape[1], bytes_per_param)
            samples.append(((float(rho), float(lev)), beta))
    return samples


@dataclass(frozen=True)
class AccuracySurface:
    """Cubic accuracy model: sum of c_ij * rho^i * levels^j over i + j <= 3."""

    coefficients: np.ndarray  # aligned with CUBIC_TERMS
    fit_mse: float

    def predict(self, rho, levels):
        rho = np.asarray(rho, dtype=np.float64)
        lev = np.asarray(levels, dtype=np.float64)
        out = np.zeros(np.broadcast(rho, lev).shape, dtype=np.float64)
        for c, (i, j) in zip(self.coefficients, CUBIC_TERMS):
            out += c * rho**i * lev**j
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "terms": [list(t) for t in CUBIC_TERMS],
            "coefficients": self.coefficients.tolist(),
            "fit_mse": self.fit_mse,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AccuracySurface":
        if [tuple(t) for t in payload["terms"]] != list(CUBIC_TERMS):
            raise ValueError("unexpected term ordering in accuracy surface file")
        return cls(
            coefficients=np.asarray(payload["coefficients"], dtype=np.float64),
            fit_mse=float(payload["fit_mse"]),
        )


def _design_matrix(rho: np.ndarray, lev: np.ndarray) -> np.ndarray:
    cols = [rho**i * lev**j for i, j in CUBIC_TERMS]
    return np.column_stack(cols)


def fit_accuracy_surface(observations) -> AccuracySurface:
    """Least-squares cubic fit of ((rho, levels), accuracy) observations.

    The fit runs in a rescaled basis (levels divided by a power of two) and
    the coefficients are rescaled back exactly, which keeps the normal
    equations well conditioned without perturbing the returned polynomial.
    """
    pts = np.array([[rho, lev] for (rho, lev), _ in observations], dtype=np.float64)
    acc = np.array([a for _, a in observations], dtype=np.float64)
    if pts.shape[0] < len(CUBIC_TERMS):
        raise ValueError(f"need at least {len(CUBIC_TERMS)} observations")

    lev_scale = 2.0 ** max(0, math.ceil(math.log2(max(pts[:, 1].max(), 1.0))))
    design = _design_matrix(pts[:, 0], pts[:, 1] / lev_scale)
    coef_scaled, _, rank, _ = np.linalg.lstsq(design, acc, rcond=None)
    if rank < len(CUBIC_TERMS):
        raise ValueError("degenerate design: observations are not in general position")
    coef = coef_scaled / np.array([lev_scale**j for _, j in CUBIC_TERMS])
    residual = design @ coef_scaled - acc
    return AccuracySurface(coefficients=coef, fit_mse=float(np.mean(residual**2)))


# Synthetic accuracy model (percentage points). A true cubic, so the fitted
# surface can reproduce it exactly; coefficients chosen so that dropping 80%
# of entries with an 8-interval grid stays within the customary 2-point
# accuracy budget while 95% dropping does not.
_ACC_BASE = 76.0
_ACC_SPARSITY_DROP = 2.8
_ACC_LEVEL_GAIN = 0.8
_ACC_LEVEL_SCALE = 32.0


def synthetic_accuracy(rho, levels):
    """Plateau-then-drop accuracy surface used for default calibration data."""
    rho = np.asarray(rho, dtype=np.float64)
    u = np.asarray(levels, dtype=np.float64) / _ACC_LEVEL_SCALE
    acc = _ACC_BASE - _ACC_SPARSITY_DROP * (1.0 - rho) ** 3 + _ACC_LEVEL_GAIN * (2.0 * u - u**2)
    return float(acc) if acc.ndim == 0 else acc


def load_accuracy_csv(source):
    """Read ((rho, levels), accuracy) observations from a rho,E,accuracy CSV.

    Accuracy columns given as fractions (all values <= 1.5) are rescaled to
    percentage points.
    """
    text = source.read_text() if hasattr(source, "read_text") else open(source).read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ValueError("empty calibration file")
    names = [h.strip().lower() for h in header]
    try:
        col_rho = names.index("rho")
        col_lev = names.index("e") if "e" in names else names.index("levels")
        col_acc = names.index("accuracy")
    except ValueError as exc:
        raise ValueError("calibration CSV must have columns rho,E,accuracy") from exc
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            rows.append(
                (float(row[col_rho]), float(row[col_lev]), float(row[col_acc]))
            )
        except (ValueError, IndexError) as exc:
            raise ValueError(f"calibration CSV line {line_no}: {exc}") from exc
    if not rows:
        raise ValueError("calibration file has no data rows")
    scale = 100.0 if max(r[2] for r in rows) <= 1.5 else 1.0
    return [((rho, lev), acc * scale) for rho, lev, acc in rows]


def synthetic_accuracy_observations(rhos, level_values, noise_std=0.0, seed=0):
    """Accuracy observations on a grid, optionally with Gaussian noise."""
    rng = np.random.default_rng(seed)
    obs = []
    for rho in rhos:
        for lev in level_values:
            acc = synthetic_accuracy(rho, lev)
            if noise_std > 0:
                acc += rng.normal(0.0, noise_std)
            obs.append(((float(rho), float(lev)), float(acc)))
    return obs
