"""Round-level execution of the split fine-tuning protocol.

Each round, every device: draws a synthetic activation batch, compresses it
with the planned (keep rate, levels), "uploads" it (bytes are counted and the
delay model is evaluated at the measured transmitted fraction), the server
updates its per-device adapter against the decompressed activations, a
synthetic gradient tensor is compressed for the downlink, and the device
updates its own adapter on its fixed least-squares task. After the local
epochs, adapters are uploaded and aggregated with dataset-size-weighted
averaging.

Real forward/backward passes are replaced by (a) Gaussian activation and
gradient tensors driving the compression path and (b) per-device linear
least-squares tasks acting on the adapter matrices, so updates, aggregation,
and the effect of compression distortion are all numerically real. Every
random stream is derived from (session seed, purpose, round, epoch, device),
so device-level concurrency can never change results.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sftsim.compression.codec import compression_ratio, encode
from sftsim.compression.codec import decode as codec_decode
from sftsim.compression.pipeline import SparseTensor, quantize_stochastic, topk_sparsify
from sftsim.planner import (
    Plan,
    PlannerContext,
    optimize_config,
    resolve_accuracy_threshold,
    solve_bandwidth,
)
from sftsim.compression.surrogate import (
    AccuracySurface,
    RatePredictor,
    calibrate_predictor,
    fit_accuracy_surface,
    load_accuracy_csv,
    measure_rate_grid,
)
from sftsim.profiles import payload_sizes
from sftsim.scenario import Scenario
from sftsim.wireless import DelayBreakdown, draw_channel, round_delay

__all__ = [
    "DeviceState",
    "LoraAdapter",
    "RoundLog",
    "SessionReport",
    "SimulationError",
    "aggregate_fedavg",
    "build_planner_context",
    "init_adapter",
    "load_adapter_checkpoint",
    "run_round",
    "run_session",
    "save_adapter_checkpoint",
]

# Sub-stream tags for seed derivation.
_TAG_ACTIVATION = 11
_TAG_QUANT = 12
_TAG_GRADIENT = 13
_TAG_GRAD_QUANT = 14
_TAG_TASK = 15
_TAG_INIT = 16

_CKPT_MAGIC = b"LORA"
_CKPT_VERSION = 1


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank adapter pairs (A: D x r, B: r x D) for a contiguous block range."""

    first_block: int
    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.first_block, tuple((a.copy(), b.copy()) for a, b in self.pairs))

    def same_shape(self, other: "LoraAdapter") -> bool:
        if self.first_block != other.first_block or len(self.pairs) != len(other.pairs):
            return False
        return all(
            a1.shape == a2.shape and b1.shape == b2.shape
            for (a1, b1), (a2, b2) in zip(self.pairs, other.pairs)
        )

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for a, b in self.pairs:
            digest.update(np.ascontiguousarray(a).tobytes())
            digest.update(np.ascontiguousarray(b).tobytes())
        return digest.hexdigest()


def init_adapter(first_block: int, num_blocks: int, embed_dim: int, rank: int,
                 init_std: float, seed) -> LoraAdapter:
    """A-side Gaussian(0, std^2), B-side zero, one pair per owned block."""
    pairs = []
    for b in range(num_blocks):
        rng = np.random.default_rng([_to_seed(seed), _TAG_INIT, first_block + b])
        a_mat = rng.normal(0.0, init_std, size=(embed_dim, rank))
        b_mat = np.zeros((rank, embed_dim))
        pairs.append((a_mat, b_mat))
    return LoraAdapter(first_block=first_block, pairs=tuple(pairs))


def _to_seed(seed) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


@dataclass
class DeviceState:
    """Per-device simulation state: adapter, fixed synthetic task, identity."""

    device_id: str
    adapter: LoraAdapter
    task_design: np.ndarray   # m x D
    task_target: np.ndarray   # m x D
    server_target: np.ndarray  # m x D, target of the server-side task
    dataset_size: int
    index: int


def aggregate_fedavg(adapters, weights) -> LoraAdapter:
    """Element-wise weighted mean of adapters, weights proportional to dataset sizes.

    Computed anchored at the first adapter (theta_1 + sum_i w_i (theta_i -
    theta_1)), which is algebraically the weighted mean but makes aggregating
    copies of one adapter an exact floating-point fixed point.
    """
    adapters = list(adapters)
    weights = np.asarray(list(weights), dtype=np.float64)
    if not adapters:
        raise ValueError("no adapters to aggregate")
    if len(adapters) != weights.shape[0]:
        raise ValueError("one weight per adapter required")
    if weights.sum() <= 0:
        raise ValueError("weights must sum to a positive value")
    head = adapters[0]
    for other in adapters[1:]:
        if not head.same_shape(other):
            raise ValueError("adapter shape mismatch")
    w = weights / weights.sum()
    pairs = []
    for pair_idx in range(len(head.pairs)):
        a_ref, b_ref = head.pairs[pair_idx]
        a_out = a_ref + sum(
            w[i] * (adapters[i].pairs[pair_idx][0] - a_ref) for i in range(len(adapters))
        )
        b_out = b_ref + sum(
            w[i] * (adapters[i].pairs[pair_idx][1] - b_ref) for i in range(len(adapters))
        )
        pairs.append((a_out, b_out))
    return LoraAdapter(first_block=head.first_block, pairs=tuple(pairs))


def _lsq_loss(adapter: LoraAdapter, design: np.ndarray, target: np.ndarray) -> float:
    m = design.shape[0]
    total = 0.0
    for a_mat, b_mat in adapter.pairs:
        residual = design @ a_mat @ b_mat - target
        total += float(np.sum(residual * residual)) / (2.0 * m)
    return total


def _lsq_step(adapter: LoraAdapter, design: np.ndarray, target: np.ndarray, lr: float) -> LoraAdapter:
    """One simultaneous gradient step of the least-squares objective on every pair."""
    m = design.shape[0]
    pairs = []
    for a_mat, b_mat in adapter.pairs:
        xa = design @ a_mat
        residual = xa @ b_mat - target
        grad_a = design.T @ (residual @ b_mat.T) / m
        grad_b = xa.T @ residual / m
        pairs.append((a_mat - lr * grad_a, b_mat - lr * grad_b))
    return LoraAdapter(adapter.first_block, tuple(pairs))


def _gaussian_f32(shape, seed_key) -> np.ndarray:
    rng = np.random.default_rng(seed_key)
    return rng.standard_normal(shape).astype(np.float32).astype(np.float64)


def _compress(tensor: np.ndarray, keep_rate: float, levels: int, seed_key):
    sparse = topk_sparsify(tensor, keep_rate)
    if levels >= 1:
        sparse = quantize_stochastic(sparse, levels, rng_seed=seed_key)
    blob = encode(sparse)
    return blob, sparse


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    broadcast_bytes: int
    delay_seconds: float
    entries: tuple[dict, ...]
    checksum: str = ""

    def with_checksum(self, checksum: str) -> "RoundLog":
        return replace(self, checksum=checksum)


def run_round(
    device_states,
    device_adapter: LoraAdapter,
    server_adapter: LoraAdapter,
    plan: Plan,
    scenario: Scenario,
    channel,
    round_index: int,
    allocation: dict[str, float],
) -> tuple[RoundLog, list[LoraAdapter], list[LoraAdapter]]:
    """One protocol round. Returns the log plus per-device updated adapters.

    ``plan.levels == 0`` disables quantization (raw float values on the wire),
    which makes the compression path an identity when the keep rate is 1.
    """
    profile = scenario.profile
    split = replace(scenario.split, cut_layer=plan.cut_layer)
    sim = scenario.simulator
    seed = scenario.seed
    alpha = profile.bytes_per_param
    rows = split.batch * profile.num_tokens
    cols = profile.embed_dim
    payloads = payload_sizes(profile, split)
    task_rows = min(sim.task_rows, rows)

    entries = []
    new_device_adapters = []
    new_server_adapters = []
    device_profiles = {d.id: d for d in scenario.devices}
    delays = []
    for state in device_states:
        dev_adapter = state.adapter.copy()
        srv_adapter = server_adapter.copy()
        bytes_up_blobs = 0
        bytes_down_blobs = 0
        betas_up = []
        betas_down = []
        for epoch in range(1, split.local_epochs + 1):
            key = [_to_seed(seed), 0, round_index, epoch, state.index]

            key[1] = _TAG_ACTIVATION
            activations = _gaussian_f32((rows, cols), tuple(key))
            key[1] = _TAG_QUANT
            blob_up, _ = _compress(activations, plan.keep_rate, plan.levels, tuple(key))
            bytes_up_blobs += blob_up.num_bytes
            betas_up.append(compression_ratio(blob_up, rows, cols, alpha))
            received = codec_decode(blob_up).to_dense()

            # Server-side pass: per-device adapter trained against the
            # decompressed activations, so distortion propagates.
            srv_design = received[:task_rows]
            srv_adapter = _lsq_step(srv_adapter, srv_design, state.server_target, sim.lr_server)

            key[1] = _TAG_GRADIENT
            gradient = _gaussian_f32((rows, cols), tuple(key))
            key[1] = _TAG_GRAD_QUANT
            blob_down, _ = _compress(gradient, plan.keep_rate, plan.levels, tuple(key))
            bytes_down_blobs += blob_down.num_bytes
            betas_down.append(compression_ratio(blob_down, rows, cols, alpha))

            dev_adapter = _lsq_step(dev_adapter, state.task_design, state.task_target, sim.lr_device)

        beta_up = float(np.mean(betas_up))
        beta_down = float(np.mean(betas_down))
        dev = device_profiles[state.device_id]
        breakdown = round_delay(
            dev,
            plan.cut_layer,
            beta_up,
            allocation[state.device_id],
            profile,
            split,
            channel,
            scenario.server,
            round_index,
            num_active=len(device_states),
            queue_position=state.index,
            beta_down=beta_down,
        )
        delays.append(breakdown.total)
        entries.append(
            {
                "device_id": state.device_id,
                "delay": _breakdown_dict(breakdown),
                "bytes_up_blobs": bytes_up_blobs,
                "bytes_up_adapter": payloads.lora_dist,
                "bytes_down_blobs": bytes_down_blobs,
                "beta_up": beta_up,
                "beta_down": beta_down,
            }
        )
        new_device_adapters.append(dev_adapter)
        new_server_adapters.append(srv_adapter)

    broadcast_bytes = payloads.block_dist if round_index == 1 else payloads.lora_dist
    log = RoundLog(
        round_index=round_index,
        broadcast_bytes=broadcast_bytes,
        delay_seconds=max(delays),
        entries=tuple(entries),
    )
    return log, new_device_adapters, new_server_adapters


def _breakdown_dict(bd: DelayBreakdown) -> dict:
    return {
        "td": bd.td, "cc": bd.cc, "it": bd.it, "sc": bd.sc,
        "gt": bd.gt, "du": bd.du, "lt": bd.lt, "total": bd.total,
    }


@dataclass(frozen=True)
class SessionReport:
    """Aggregated outcome of one simulated session."""

    seed: int
    plan: Plan
    num_rounds: int
    num_devices: int
    total_delay_seconds: float
    uplink_bytes: int
    downlink_bytes: int
    uplink_activation_bytes: int
    downlink_gradient_bytes: int
    uncompressed_activation_bytes: int
    loss_trace: tuple[float, ...]
    rounds: tuple[RoundLog, ...]
    final_checksum: str
    # Final aggregated adapters; excluded from the serialized report.
    device_adapter: LoraAdapter | None = field(default=None, compare=False, repr=False)
    server_adapter: LoraAdapter | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "plan": self.plan.to_dict(),
            "num_rounds": self.num_rounds,
            "num_devices": self.num_devices,
            "total_delay_seconds": self.total_delay_seconds,
            "uplink_bytes": self.uplink_bytes,
            "downlink_bytes": self.downlink_bytes,
            "uplink_activation_bytes": self.uplink_activation_bytes,
            "downlink_gradient_bytes": self.downlink_gradient_bytes,
            "uncompressed_activation_bytes": self.uncompressed_activation_bytes,
            "loss_trace": list(self.loss_trace),
            "final_checksum": self.final_checksum,
            "rounds": [
                {
                    "round_index": log.round_index,
                    "broadcast_bytes": log.broadcast_bytes,
                    "delay_seconds": log.delay_seconds,
                    "checksum": log.checksum,
                    "devices": list(log.entries),
                }
                for log in self.rounds
            ],
        }


def _packaged_accuracy_observations():
    from importlib.resources import files

    path = files("sftsim").joinpath("data/accuracy_grid.csv")
    return load_accuracy_csv(path)


def build_planner_context(scenario: Scenario) -> PlannerContext:
    """Assemble surrogates and bounds into the planner's working context."""
    import json as _json

    policy = scenario.accuracy
    if policy.surface_json:
        surface = AccuracySurface.from_dict(_json.loads(Path(policy.surface_json).read_text()))
    else:
        obs = (
            load_accuracy_csv(policy.accuracy_csv)
            if policy.accuracy_csv
            else _packaged_accuracy_observations()
        )
        surface = fit_accuracy_surface(obs)

    bounds = scenario.compression
    settings = scenario.planner
    steps = int(round((bounds.rho_max - bounds.rho_min) / settings.rho_grid_step))
    rho_grid = np.round(bounds.rho_min + settings.rho_grid_step * np.arange(steps + 1), 10)
    rho_grid = rho_grid[rho_grid <= bounds.rho_max + 1e-12]
    level_grid = [e for e in settings.level_grid if bounds.levels_min <= e <= bounds.levels_max]
    if not level_grid:
        raise SimulationError("no quantization levels inside the configured bounds")

    if policy.predictor_json:
        predictor = RatePredictor.from_dict(_json.loads(Path(policy.predictor_json).read_text()))
    else:
        samples = measure_rate_grid(
            rho_grid, level_grid, shape=(256, 256), seed=scenario.seed,
            bytes_per_param=scenario.profile.bytes_per_param,
        )
        predictor = calibrate_predictor(samples)

    threshold = (
        policy.threshold_points
        if policy.threshold_points is not None
        else resolve_accuracy_threshold(surface, rho_grid, level_grid, policy.margin_points)
    )
    return PlannerContext(
        profile=scenario.profile,
        split=scenario.split,
        devices=scenario.devices,
        server=scenario.server,
        predictor=predictor,
        surface=surface,
        accuracy_threshold=threshold,
        memory_cap_bytes=scenario.memory_cap_bytes,
        rho_bounds=(bounds.rho_min, bounds.rho_max),
        level_bounds=(bounds.levels_min, bounds.levels_max),
    )


def _plan_from_defaults(scenario: Scenario) -> Plan | None:
    pd = scenario.plan_defaults
    if pd.cut_layer is None or pd.keep_rate is None or pd.levels is None:
        return None
    return Plan(
        cut_layer=pd.cut_layer,
        keep_rate=pd.keep_rate,
        levels=pd.levels,
        bandwidth_hz=None,
        objective_seconds=float("nan"),
        feasible=True,
    )


def run_session(scenario: Scenario, plan: Plan | None = None,
                context: PlannerContext | None = None) -> SessionReport:
    """Full session: plan once, then per round allocate bandwidth, run, aggregate."""
    profile = scenario.profile
    predictor = None
    if plan is None:
        plan = _plan_from_defaults(scenario)
    if plan is None:
        context = context or build_planner_context(scenario)
        predictor = context.predictor
        result = optimize_config(context, scenario.planner)
        if not result.feasible:
            raise SimulationError(
                "infeasible plan: no configuration satisfies the constraints; "
                f"closest candidate violates {result.violations}"
            )
        plan = Plan(
            cut_layer=result.cut_layer,
            keep_rate=result.rho,
            levels=result.levels,
            bandwidth_hz=None,
            objective_seconds=result.objective_seconds,
            feasible=True,
        )
    if not 0 < plan.cut_layer < profile.num_layers:
        raise SimulationError("plan cut_layer must satisfy 0 < l < num_layers")

    # Planned transmitted fraction: what the bandwidth allocator assumes
    # before the round's actual tensors are compressed.
    if plan.levels < 1:
        beta_plan = 1.0  # raw values on the wire
    else:
        if predictor is None and context is not None:
            predictor = context.predictor
        if predictor is not None:
            beta_plan = float(predictor.predict(plan.keep_rate, float(plan.levels)))
        else:
            ((_, beta_plan),) = measure_rate_grid(
                [plan.keep_rate], [plan.levels], shape=(256, 256), seed=scenario.seed,
                bytes_per_param=profile.bytes_per_param,
            )

    split = replace(scenario.split, cut_layer=plan.cut_layer)
    seed = scenario.seed
    rank = profile.lora_rank
    task_rows = min(scenario.simulator.task_rows, split.batch * profile.num_tokens)

    device_adapter = init_adapter(1, plan.cut_layer, profile.embed_dim, rank,
                                  scenario.simulator.init_std, seed)
    server_adapter = init_adapter(plan.cut_layer + 1, profile.num_layers - plan.cut_layer,
                                  profile.embed_dim, rank, scenario.simulator.init_std, seed)

    states = []
    for index, dev in enumerate(scenario.devices):
        rng = np.random.default_rng([_to_seed(seed), _TAG_TASK, index])
        states.append(
            DeviceState(
                device_id=dev.id,
                adapter=device_adapter.copy(),
                task_design=rng.standard_normal((task_rows, profile.embed_dim)),
                task_target=rng.standard_normal((task_rows, profile.embed_dim)),
                server_target=rng.standard_normal((task_rows, profile.embed_dim)),
                dataset_size=dev.dataset_size,
                index=index,
            )
        )
    weights = [s.dataset_size for s in states]

    rounds: list[RoundLog] = []
    loss_trace: list[float] = []
    total_delay = 0.0
    uplink_bytes = 0
    downlink_bytes = 0
    uplink_activation_bytes = 0
    downlink_gradient_bytes = 0

    for t in range(1, split.rounds + 1):
        channel = draw_channel(scenario.devices, scenario.server, t, seed)
        bw = solve_bandwidth(
            scenario.devices, plan.cut_layer, beta_plan, profile, split, channel,
            scenario.server, scenario.planner,
        )
        for state in states:  # broadcast: everyone starts from the aggregate
            state.adapter = device_adapter.copy()
        log, dev_adapters, srv_adapters = run_round(
            states, device_adapter, server_adapter, plan, scenario, channel, t, bw.allocation
        )
        device_adapter = aggregate_fedavg(dev_adapters, weights)
        server_adapter = aggregate_fedavg(srv_adapters, weights)
        checksum = hashlib.sha256(
            (device_adapter.checksum() + server_adapter.checksum()).encode()
        ).hexdigest()
        log = log.with_checksum(checksum)
        rounds.append(log)

        total_delay += log.delay_seconds
        uplink_bytes += sum(e["bytes_up_blobs"] + e["bytes_up_adapter"] for e in log.entries)
        uplink_activation_bytes += sum(e["bytes_up_blobs"] for e in log.entries)
        downlink_bytes += log.broadcast_bytes + sum(e["bytes_down_blobs"] for e in log.entries)
        downlink_gradient_bytes += sum(e["bytes_down_blobs"] for e in log.entries)

        total_w = sum(weights)
        loss = sum(
            (w / total_w) * _lsq_loss(device_adapter, s.task_design, s.task_target)
            for w, s in zip(weights, states)
        )
        loss_trace.append(float(loss))

    rows = split.batch * profile.num_tokens
    per_epoch_raw = rows * profile.embed_dim * profile.bytes_per_param
    uncompressed = per_epoch_raw * split.local_epochs * split.rounds * len(states)

    return SessionReport(
        seed=seed,
        plan=plan,
        num_rounds=split.rounds,
        num_devices=len(states),
        total_delay_seconds=total_delay,
        uplink_bytes=uplink_bytes,
        downlink_bytes=downlink_bytes,
        uplink_activation_bytes=uplink_activation_bytes,
        downlink_gradient_bytes=downlink_gradient_bytes,
        uncompressed_activation_bytes=uncompressed,
        loss_trace=tuple(loss_trace),
        rounds=tuple(rounds),
        final_checksum=rounds[-1].checksum if rounds else "",
        device_adapter=device_adapter,
        server_adapter=server_adapter,
    )


def save_adapter_checkpoint(adapter: LoraAdapter, path: str | Path) -> None:
    """Checkpoint format: shape header, then raw little-endian float32 arrays."""
    parts = [
        _CKPT_MAGIC,
        struct.pack("<BII", _CKPT_VERSION, adapter.first_block, len(adapter.pairs)),
    ]
    for a_mat, b_mat in adapter.pairs:
        parts.append(struct.pack("<IIII", *a_mat.shape, *b_mat.shape))
    for a_mat, b_mat in adapter.pairs:
        parts.append(a_mat.astype("<f4").tobytes())
        parts.append(b_mat.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_adapter_checkpoint(path: str | Path) -> LoraAdapter:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not an adapter checkpoint")
    version, first_block, num_pairs = struct.unpack_from("<BII", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 4 + 9
    shapes = []
    for _ in range(num_pairs):
        shapes.append(struct.unpack_from("<IIII", data, pos))
        pos += 16
    pairs = []
    for ar, ac, br, bc in shapes:
        a_mat = np.frombuffer(data, dtype="<f4", count=ar * ac, offset=pos).reshape(ar, ac)
        pos += 4 * ar * ac
        b_mat = np.frombuffer(data, dtype="<f4", count=br * bc, offset=pos).reshape(br, bc)
        pos += 4 * br * bc
        pairs.append((a_mat.astype(np.float64), b_mat.astype(np.float64)))
    return LoraAdapter(first_block=first_block, pairs=tuple(pairs))
