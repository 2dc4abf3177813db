"""Two-timescale resource management.

Large timescale: pick the cut layer, keep rate, and quantization level once
per session by relaxing the accuracy/memory/box constraints into a dual
search (subgradient updates on the multipliers around an exhaustive inner
sweep per cut layer). Small timescale: allocate per-device bandwidth every
round by sequential linearization of the min-max delay problem, solving a
trust-region LP subproblem per iteration.

Sign convention: the relaxed objective is the standard saddle form
``delay - sum(lambda_p * g_p)`` with feasibility written as ``g_p >= 0`` and
multipliers clamped non-negative; constraint residuals are normalized
(accuracy in points, memory relative to the cap, box constraints relative to
their ranges) so one step size serves all of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from sftsim.compression.surrogate import AccuracySurface, RatePredictor
from sftsim.profiles import ModelProfile, SplitConfig, memory_device
from sftsim.wireless import ChannelState, DeviceProfile, ServerProfile, round_delay, round_delay_bandwidth_grad

__all__ = [
    "BandwidthResult",
    "ConfigResult",
    "Multipliers",
    "Plan",
    "PlannerContext",
    "PlannerSettings",
    "brute_force_bandwidth",
    "brute_force_config",
    "constraint_residuals",
    "lagrangian",
    "nominal_channel",
    "optimize_config",
    "resolve_accuracy_threshold",
    "solve_bandwidth",
    "uniform_allocation",
]


@dataclass(frozen=True)
class PlannerSettings:
    """Knobs for both timescales."""

    step_size: float = 0.5                 # subgradient step mu_0 (decays as mu_0 / sqrt(k))
    tolerance: float = 1e-4                # dual loop |delta L| stop
    max_iterations: int = 60
    search_mode: str = "grid"              # "grid" or "gradient"
    rho_grid_step: float = 0.05
    level_grid: tuple[int, ...] = (2, 4, 8, 16, 32)
    gradient_iterations: int = 80
    trust_region_fraction: float = 0.1     # SQP step bound as a fraction of total bandwidth
    sqp_tolerance: float = 1e-9
    sqp_max_iterations: int = 100

    def __post_init__(self) -> None:
        if self.tolerance <= 0 or self.sqp_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.trust_region_fraction <= 0:
            raise ValueError("trust_region_fraction must be positive")
        if self.search_mode not in ("grid", "gradient"):
            raise ValueError("search_mode must be 'grid' or 'gradient'")


@dataclass(frozen=True)
class Multipliers:
    """Non-negative dual variables, one per relaxed inequality."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if np.any(vals < 0):
            raise ValueError("multipliers must be non-negative")
        if vals.shape[0] != len(self.labels):
            raise ValueError("one label per multiplier required")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Plan:
    """Output of the two-timescale optimization."""

    cut_layer: int
    keep_rate: float
    levels: int
    bandwidth_hz: dict[str, float] | None
    objective_seconds: float
    feasible: bool
    violations: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cut_layer": self.cut_layer,
            "keep_rate": self.keep_rate,
            "levels": self.levels,
            "bandwidth_hz": self.bandwidth_hz,
            "objective_seconds": self.objective_seconds,
            "feasible": self.feasible,
            "violations": self.violations,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Plan":
        return cls(
            cut_layer=int(payload["cut_layer"]),
            keep_rate=float(payload["keep_rate"]),
            levels=int(payload["levels"]),
            bandwidth_hz=payload.get("bandwidth_hz"),
            objective_seconds=float(payload["objective_seconds"]),
            feasible=bool(payload["feasible"]),
            violations=dict(payload.get("violations", {})),
        )


def nominal_channel(devices, server: ServerProfile, round_index: int = 2) -> ChannelState:
    """Channel at every device's nominal SNR (the large-timescale view)."""
    return ChannelState(
        round_index=round_index,
        snr_up={d.id: d.snr_model.nominal_linear for d in devices},
        snr_down={d.id: server.snr_downlink_linear for d in devices},
    )


def uniform_allocation(devices, total_hz: float) -> dict[str, float]:
    """Equal share of the band, waterfilled against per-device caps."""
    caps = {d.id: d.bandwidth_max_hz for d in devices}
    if sum(caps.values()) < total_hz * (1 - 1e-12):
        raise ValueError("infeasible allocation: bandwidth caps sum below the total band")
    alloc = {d.id: 0.0 for d in devices}
    active = list(caps)
    remaining = total_hz
    while active:
        share = remaining / len(active)
        clamped = [dev for dev in active if caps[dev] <= share]
        if not clamped:
            for dev in active:
                alloc[dev] = share
            break
        for dev in clamped:
            alloc[dev] = caps[dev]
            remaining -= caps[dev]
            active.remove(dev)
    return alloc


def resolve_accuracy_threshold(
    surface: AccuracySurface, rho_grid, level_grid, margin_points: float
) -> float:
    """Threshold policy: best achievable surface value on the grid minus a margin."""
    rr, ee = np.meshgrid(np.asarray(rho_grid), np.asarray(level_grid), indexing="ij")
    return float(np.max(surface.predict(rr, ee))) - margin_points


@dataclass(frozen=True)
class PlannerContext:
    """Everything the large-timescale search needs to score a configuration."""

    profile: ModelProfile
    split: SplitConfig       # cut_layer field ignored; batch/epochs/rounds used
    devices: tuple[DeviceProfile, ...]
    server: ServerProfile
    predictor: RatePredictor
    surface: AccuracySurface
    accuracy_threshold: float
    memory_cap_bytes: float
    rho_bounds: tuple[float, float] = (0.05, 1.0)
    level_bounds: tuple[int, int] = (2, 32)
    _coef_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def _split_at(self, cut_layer: int) -> SplitConfig:
        return replace(self.split, cut_layer=cut_layer)

    def memory_bytes(self, cut_layer: int) -> int:
        return memory_device(self.profile, self._split_at(cut_layer))

    def delay_coefficients(self, cut_layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-device (base, slope) of the mean per-round delay, affine in beta.

        Evaluated at nominal SNR and a uniform (cap-aware) bandwidth split;
        the first round carries the block distribution payload, later rounds
        the adapter broadcast, so the mean weighs them 1 : T-1.
        """
        if cut_layer in self._coef_cache:
            return self._coef_cache[cut_layer]
        alloc = uniform_allocation(self.devices, self.server.total_bandwidth_hz)
        rounds = self.split.rounds
        base = np.empty(len(self.devices))
        slope = np.empty(len(self.devices))
        for pos, dev in enumerate(self.devices):
            totals = {}
            for beta in (0.0, 1.0):
                per_round = []
                for t in (1, 2):
                    chan = nominal_channel(self.devices, self.server, round_index=t)
                    bd = round_delay(
                        dev, cut_layer, beta, alloc[dev.id], self.profile, self._split_at(cut_layer),
                        chan, self.server, t, num_active=len(self.devices), queue_position=pos,
                    )
                    per_round.append(bd.total)
                totals[beta] = (per_round[0] + (rounds - 1) * per_round[1]) / rounds
            base[pos] = totals[0.0]
            slope[pos] = totals[1.0] - totals[0.0]
        self._coef_cache[cut_layer] = (base, slope)
        return base, slope

    def config_delay(self, cut_layer: int, beta) -> np.ndarray | float:
        """Mean per-round delay (max over devices) for the given beta(s)."""
        base, slope = self.delay_coefficients(cut_layer)
        beta_arr = np.asarray(beta, dtype=np.float64)
        vals = np.max(base[:, None] + np.outer(slope, beta_arr.ravel()), axis=0)
        return float(vals[0]) if beta_arr.ndim == 0 else vals.reshape(beta_arr.shape)


def _constraint_labels(context: PlannerContext) -> tuple[str, ...]:
    labels = ["accuracy"]
    labels += [f"memory[{d.id}]" for d in context.devices]
    labels += ["rho_min", "rho_max", "levels_min", "levels_max", "cut_max", "cut_min"]
    return tuple(labels)


def constraint_residuals(rho: float, levels: float, cut_layer: int, context: PlannerContext) -> np.ndarray:
    """Normalized feasibility residuals g_p (all must be >= 0 at a feasible point)."""
    rho_min, rho_max = context.rho_bounds
    lev_min, lev_max = context.level_bounds
    rho_span = max(rho_max - rho_min, 1e-12)
    lev_span = max(lev_max - lev_min, 1e-12)
    num_layers = context.profile.num_layers
    acc = context.surface.predict(rho, levels)
    mem = context.memory_bytes(cut_layer)
    g = [acc - context.accuracy_threshold]
    g += [(context.memory_cap_bytes - mem) / context.memory_cap_bytes] * len(context.devices)
    g += [
        (rho - rho_min) / rho_span,
        (rho_max - rho) / rho_span,
        (levels - lev_min) / lev_span,
        (lev_max - levels) / lev_span,
        (num_layers - cut_layer) / num_layers,
        cut_layer / num_layers,
    ]
    return np.asarray(g, dtype=np.float64)


def lagrangian(rho: float, levels: float, cut_layer: int, multipliers: Multipliers, context: PlannerContext) -> float:
    """Relaxed objective: delay minus multiplier-weighted feasibility residuals.

    Equals the plain delay when every multiplier is zero.
    """
    beta = context.predictor.predict(rho, levels)
    tau = context.config_delay(cut_layer, beta)
    g = constraint_residuals(rho, levels, cut_layer, context)
    return float(tau - float(multipliers.values @ g))


def _config_grids(context: PlannerContext, settings: PlannerSettings):
    rho_min, rho_max = context.rho_bounds
    steps = int(round((rho_max - rho_min) / settings.rho_grid_step))
    rho_grid = np.round(rho_min + settings.rho_grid_step * np.arange(steps + 1), 10)
    rho_grid = rho_grid[rho_grid <= rho_max + 1e-12]
    lev_min, lev_max = context.level_bounds
    level_grid = np.array([e for e in settings.level_grid if lev_min <= e <= lev_max], dtype=np.int64)
    if rho_grid.size == 0 or level_grid.size == 0:
        raise ValueError("empty configuration grid")
    cuts = np.arange(1, context.profile.num_layers)
    return rho_grid, level_grid, cuts


@dataclass(frozen=True)
class ConfigResult:
    """Large-timescale search outcome plus the dual-iteration trace."""

    rho: float
    levels: int
    cut_layer: int
    objective_seconds: float
    feasible: bool
    converged: bool
    iterations: int
    multipliers: Multipliers
    violations: dict[str, float]
    trace: list[dict]


def _grid_tables(context: PlannerContext, rho_grid, level_grid, cuts):
    """Precompute beta, accuracy, delay, and residual tables over the grid."""
    rr, ee = np.meshgrid(rho_grid, level_grid, indexing="ij")
    beta = context.predictor.predict(rr, ee.astype(np.float64))
    acc = context.surface.predict(rr, ee.astype(np.float64))
    tau = np.empty((cuts.size,) + rr.shape)
    mem = np.empty(cuts.size)
    for i, l in enumerate(cuts):
        base, slope = context.delay_coefficients(int(l))
        tau[i] = np.max(base[:, None, None] + slope[:, None, None] * beta[None, :, :], axis=0)
        mem[i] = context.memory_bytes(int(l))
    return beta, acc, tau, mem


def optimize_config(context: PlannerContext, settings: PlannerSettings | None = None) -> ConfigResult:
    """Joint choice of keep rate, quantization level, and cut layer.

    Outer loop: projected subgradient updates on the multipliers. Inner loop:
    per cut layer, minimize the relaxed objective over (rho, levels) - an
    exhaustive sweep in grid mode, projected gradient descent on rho with
    enumerated levels in gradient mode. Every candidate evaluated anywhere in
    the search feeds a best-feasible incumbent, which is what gets returned;
    when nothing feasible exists the least-violating candidate is returned
    with ``feasible=False``.
    """
    settings = settings or PlannerSettings()
    labels = _constraint_labels(context)
    lam = np.zeros(len(labels))
    rho_grid, level_grid, cuts = _config_grids(context, settings)

    if settings.search_mode == "grid":
        return _optimize_config_grid(context, settings, labels, lam, rho_grid, level_grid, cuts)
    return _optimize_config_gradient(context, settings, labels, lam, rho_grid, level_grid, cuts)


def _residual_tables(context, acc, rho_grid, level_grid, cuts, mem):
    """Residuals arranged for vectorized weighting: per-point and per-cut parts."""
    rho_min, rho_max = context.rho_bounds
    lev_min, lev_max = context.level_bounds
    rho_span = max(rho_max - rho_min, 1e-12)
    lev_span = max(lev_max - lev_min, 1e-12)
    num_layers = context.profile.num_layers
    rr, ee = np.meshgrid(rho_grid, level_grid.astype(np.float64), indexing="ij")
    point_part = np.stack(
        [
            acc - context.accuracy_threshold,
            (rr - rho_min) / rho_span,
            (rho_max - rr) / rho_span,
            (ee - lev_min) / lev_span,
            (lev_max - ee) / lev_span,
        ]
    )
    cut_part = np.stack(
        [
            (context.memory_cap_bytes - mem) / context.memory_cap_bytes,
            (num_layers - cuts) / num_layers,
            cuts / num_layers,
        ]
    )
    return point_part, cut_part


def _weighted_residuals(lam, point_part, cut_part, n_devices):
    """lambda . g split into a per-point field and a per-cut offset."""
    lam_acc = lam[0]
    lam_mem = lam[1 : 1 + n_devices].sum()
    lam_rho_min, lam_rho_max, lam_lev_min, lam_lev_max, lam_cut_max, lam_cut_min = lam[1 + n_devices :]
    point = (
        lam_acc * point_part[0]
        + lam_rho_min * point_part[1]
        + lam_rho_max * point_part[2]
        + lam_lev_min * point_part[3]
        + lam_lev_max * point_part[4]
    )
    cut = lam_mem * cut_part[0] + lam_cut_max * cut_part[1] + lam_cut_min * cut_part[2]
    return point, cut


def _optimize_config_grid(context, settings, labels, lam, rho_grid, level_grid, cuts):
    beta, acc, tau, mem = _grid_tables(context, rho_grid, level_grid, cuts)
    point_part, cut_part = _residual_tables(context, acc, rho_grid, level_grid, cuts, mem)
    n_dev = len(context.devices)

    feasible_mask = (acc[None, :, :] >= context.accuracy_threshold) & (
        mem[:, None, None] < context.memory_cap_bytes
    )

    # Exhaustive incumbent: the constrained grid optimum, if any point is feasible.
    incumbent = None
    if feasible_mask.any():
        masked = np.where(feasible_mask, tau, np.inf)
        li, ri, ei = np.unravel_index(np.argmin(masked), masked.shape)
        incumbent = (int(cuts[li]), float(rho_grid[ri]), int(level_grid[ei]), float(tau[li, ri, ei]))

    trace: list[dict] = []
    prev_value = None
    converged = False
    current = None
    iterations = 0
    for k in range(settings.max_iterations):
        iterations = k + 1
        point_w, cut_w = _weighted_residuals(lam, point_part, cut_part, n_dev)
        relaxed = tau - point_w[None, :, :] - cut_w[:, None, None]
        li, ri, ei = np.unravel_index(np.argmin(relaxed), relaxed.shape)
        value = float(relaxed[li, ri, ei])
        current = (int(cuts[li]), float(rho_grid[ri]), int(level_grid[ei]), float(tau[li, ri, ei]))
        g = constraint_residuals(current[1], current[2], current[0], context)
        violation = np.maximum(-g, 0.0)
        trace.append(
            {
                "iteration": k,
                "lagrangian": value,
                "objective_seconds": current[3],
                "max_violation": float(violation.max()),
                "lambdas": lam.copy(),
            }
        )
        if prev_value is not None and abs(value - prev_value) < settings.tolerance and violation.max() <= 1e-9:
            converged = True
            break
        prev_value = value
        step = settings.step_size / math.sqrt(k + 1)
        lam = np.maximum(0.0, lam - step * g)

    return _finish_config(context, labels, lam, incumbent, current, trace, converged, iterations)


def _optimize_config_gradient(context, settings, labels, lam, rho_grid, level_grid, cuts):
    """Gradient mode: projected descent on rho per (cut, level); levels stay enumerated."""
    rho_min, rho_max = context.rho_bounds
    span = rho_max - rho_min
    mults = Multipliers(values=lam, labels=labels)
    evaluated: list[tuple] = []

    def relaxed(rho, lev, cut):
        return lagrangian(float(rho), float(lev), int(cut), mults, context)

    trace: list[dict] = []
    prev_value = None
    converged = False
    current = None
    iterations = 0
    for k in range(settings.max_iterations):
        iterations = k + 1
        mults = Multipliers(values=lam, labels=labels)
        best = None
        for cut in cuts:
            for lev in level_grid:
                for rho0 in (rho_min, 0.5 * (rho_min + rho_max), rho_max):
                    rho = rho0
                    h = max(1e-5 * span, 1e-7)
                    for it in range(settings.gradient_iterations):
                        up = relaxed(min(rho + h, rho_max), lev, cut)
                        dn = relaxed(max(rho - h, rho_min), lev, cut)
                        grad = (up - dn) / (min(rho + h, rho_max) - max(rho - h, rho_min))
                        step = 0.2 * span / math.sqrt(it + 1)
                        rho = float(np.clip(rho - step * math.copysign(1.0, grad) * min(abs(grad), 1.0), rho_min, rho_max))
                    val = relaxed(rho, lev, cut)
                    beta = context.predictor.predict(rho, float(lev))
                    tau = context.config_delay(int(cut), beta)
                    evaluated.append((int(cut), rho, int(lev), float(tau)))
                    cand = (val, int(cut), rho, int(lev), float(tau))
                    if best is None or cand[0] < best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                        best = cand
        value, cut, rho, lev, tau = best
        current = (cut, rho, lev, tau)
        g = constraint_residuals(rho, lev, cut, context)
        violation = np.maximum(-g, 0.0)
        trace.append(
            {
                "iteration": k,
                "lagrangian": value,
                "objective_seconds": tau,
                "max_violation": float(violation.max()),
                "lambdas": lam.copy(),
            }
        )
        if prev_value is not None and abs(value - prev_value) < settings.tolerance and violation.max() <= 1e-9:
            converged = True
            break
        prev_value = value
        lam = np.maximum(0.0, lam - (settings.step_size / math.sqrt(k + 1)) * g)

    incumbent = None
    for cut, rho, lev, tau in evaluated:
        g = constraint_residuals(rho, lev, cut, context)
        if g.min() >= 0 and (incumbent is None or tau < incumbent[3]):
            incumbent = (cut, rho, lev, tau)
    return _finish_config(context, labels, lam, incumbent, current, trace, converged, iterations)


def _finish_config(context, labels, lam, incumbent, current, trace, converged, iterations):
    mults = Multipliers(values=lam, labels=labels)
    chosen = incumbent if incumbent is not None else current
    cut, rho, lev, tau = chosen
    g = constraint_residuals(rho, lev, cut, context)
    violations = {
        label: float(max(-gi, 0.0)) for label, gi in zip(labels, g) if gi < -1e-9
    }
    return ConfigResult(
        rho=rho,
        levels=int(lev),
        cut_layer=int(cut),
        objective_seconds=float(tau),
        feasible=incumbent is not None,
        converged=converged,
        iterations=iterations,
        multipliers=mults,
        violations=violations,
        trace=trace,
    )


def brute_force_config(context: PlannerContext, settings: PlannerSettings | None = None):
    """Exhaustive feasible grid minimum, evaluated point by point (oracle path)."""
    settings = settings or PlannerSettings()
    rho_grid, level_grid, cuts = _config_grids(context, settings)
    best = None
    for cut in cuts:
        base, slope = context.delay_coefficients(int(cut))
        mem_ok = context.memory_bytes(int(cut)) < context.memory_cap_bytes
        if not mem_ok:
            continue
        for rho in rho_grid:
            for lev in level_grid:
                if context.surface.predict(float(rho), float(lev)) < context.accuracy_threshold:
                    continue
                beta = context.predictor.predict(float(rho), float(lev))
                tau = float(np.max(base + slope * beta))
                if best is None or tau < best[3]:
                    best = (int(cut), float(rho), int(lev), tau)
    if best is None:
        return None
    return {"cut_layer": best[0], "rho": best[1], "levels": best[2], "objective_seconds": best[3]}


# --- small timescale: bandwidth allocation -------------------------------


@dataclass(frozen=True)
class BandwidthResult:
    allocation: dict[str, float]
    objective_seconds: float
    iterations: int
    converged: bool


def _hyperbola_coefficients(devices, cut_layer, beta, profile, split, channel, server):
    """Extract tau_n(b) = P_n + Q_n / b exactly from the delay model.

    Anchored at a representative bandwidth so splitting the hyperbola from
    the constant part does not lose precision to cancellation.
    """
    p = np.empty(len(devices))
    q = np.empty(len(devices))
    for pos, dev in enumerate(devices):
        b0 = min(server.total_bandwidth_hz / len(devices), dev.bandwidth_max_hz)
        bd = round_delay(
            dev, cut_layer, beta, b0, profile, split, channel, server,
            channel.round_index, num_active=len(devices), queue_position=pos,
        )
        grad = round_delay_bandwidth_grad(dev, cut_layer, beta, b0, profile, split, channel)
        q[pos] = -grad * b0 * b0
        p[pos] = bd.total - q[pos] / b0
    return p, q


def solve_bandwidth(
    devices,
    cut_layer: int,
    beta: float,
    profile: ModelProfile,
    split: SplitConfig,
    channel: ChannelState,
    server: ServerProfile,
    settings: PlannerSettings | None = None,
) -> BandwidthResult:
    """Min-max delay bandwidth split via sequential linearization.

    Each iteration linearizes every device's delay at the current allocation,
    solves the resulting LP (epigraph variable, simplex-sum and box
    constraints, infinity-norm trust region), and accepts the step only if
    the true worst-case delay improves; rejected steps shrink the trust
    region. Stops on small objective change, small step, or the iteration
    cap.
    """
    settings = settings or PlannerSettings()
    total = server.total_bandwidth_hz
    caps = np.array([d.bandwidth_max_hz for d in devices], dtype=np.float64)
    if caps.sum() < total * (1 - 1e-12):
        raise ValueError("infeasible allocation: bandwidth caps sum below the total band")

    p, q = _hyperbola_coefficients(devices, cut_layer, beta, profile, split, channel, server)

    # Work in band fractions for LP conditioning.
    caps_f = np.minimum(caps / total, 1.0)
    q_f = q / total

    def objective(b_frac: np.ndarray) -> float:
        with np.errstate(divide="ignore"):
            return float(np.max(p + np.where(q_f > 0, q_f / b_frac, 0.0)))

    alloc0 = uniform_allocation(devices, total)
    b = np.array([alloc0[d.id] / total for d in devices])
    f_cur = objective(b)
    trust = settings.trust_region_fraction
    n = len(devices)
    converged = False
    iterations = 0

    for k in range(settings.sqp_max_iterations):
        iterations = k + 1
        grad = -q_f / (b * b)
        # Variables x = [delta_b (n), delta_tau]; minimize delta_tau.
        c = np.zeros(n + 1)
        c[-1] = 1.0
        a_ub = np.zeros((n, n + 1))
        a_ub[np.arange(n), np.arange(n)] = grad
        a_ub[:, -1] = -1.0
        b_ub = f_cur - (p + q_f / b)
        a_eq = np.zeros((1, n + 1))
        a_eq[0, :n] = 1.0
        bounds = [
            (max(-b[i], -trust), min(caps_f[i] - b[i], trust)) for i in range(n)
        ] + [(None, None)]
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[0.0], bounds=bounds, method="highs")
        if not res.success:
            break
        delta_b = res.x[:n]
        delta_tau = res.x[-1]
        step_norm = float(np.linalg.norm(delta_b))
        if step_norm <= settings.sqp_tolerance:
            converged = True
            break
        candidate = np.clip(b + delta_b, 0.0, caps_f)
        f_new = objective(np.maximum(candidate, 1e-300))
        if f_new < f_cur:
            b = candidate
            improved = f_cur - f_new
            f_cur = f_new
            trust = min(trust * 1.5, settings.trust_region_fraction)
            if improved <= settings.sqp_tolerance or abs(delta_tau) <= settings.sqp_tolerance:
                converged = True
                break
        else:
            trust *= 0.5
            if trust * np.max(caps_f) <= settings.sqp_tolerance:
                converged = True
                break

    # Repair the simplex sum exactly (solver equality tolerance is ~1e-10).
    residual = 1.0 - b.sum()
    if abs(residual) > 0:
        room = (caps_f - b) if residual > 0 else b
        weight = room / room.sum() if room.sum() > 0 else np.full(n, 1.0 / n)
        b = np.clip(b + residual * weight, 0.0, caps_f)

    allocation = {d.id: float(b[i] * total) for i, d in enumerate(devices)}
    return BandwidthResult(
        allocation=allocation,
        objective_seconds=objective(b),
        iterations=iterations,
        converged=converged,
    )


def brute_force_bandwidth(
    devices,
    cut_layer: int,
    beta: float,
    profile: ModelProfile,
    split: SplitConfig,
    channel: ChannelState,
    server: ServerProfile,
    resolution: float = 0.01,
):
    """Lattice search oracle: enumerate allocations on a resolution * total grid."""
    total = server.total_bandwidth_hz
    p, q = _hyperbola_coefficients(devices, cut_layer, beta, profile, split, channel, server)
    caps = np.array([d.bandwidth_max_hz for d in devices], dtype=np.float64)
    n = len(devices)
    m = int(round(1.0 / resolution))

    # Enumerate compositions of m into n parts: free meshgrid over n-1 axes,
    # the last part absorbs the remainder.
    grids = np.meshgrid(*([np.arange(m + 1)] * (n - 1)), indexing="ij") if n > 1 else []
    if n == 1:
        parts = np.array([[m]])
    else:
        free = np.stack([g.ravel() for g in grids], axis=1)
        last = m - free.sum(axis=1)
        keep = last >= 0
        parts = np.column_stack([free[keep], last[keep]])

    b = parts.astype(np.float64) * (resolution * total)
    ok = np.all(b <= caps[None, :] * (1 + 1e-9), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = p[None, :] + np.where(q[None, :] > 0, q[None, :] / b, 0.0)
    vals[np.any((b == 0) & (q[None, :] > 0), axis=1)] = np.inf
    tau = np.where(ok, np.max(vals, axis=1), np.inf)
    best_idx = int(np.argmin(tau))
    if not np.isfinite(tau[best_idx]):
        raise ValueError("no feasible lattice point")
    allocation = {d.id: float(b[best_idx, i]) for i, d in enumerate(devices)}
    return {"allocation": allocation, "objective_seconds": float(tau[best_idx])}
