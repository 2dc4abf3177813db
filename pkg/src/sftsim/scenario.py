"""Scenario files: the single configuration format for all subcommands.

A scenario is a JSON document with explicit units in field names
(``*_hz``, ``*_bytes``); the loader validates strictly and reports problems
as ``path.to.field: reason``. Defaults mirror the reference setup: ViT-base
geometry, 8 devices, batch 64, LoRA rank 16, 30 MHz of shared band.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from sftsim.planner import PlannerSettings
from sftsim.profiles import ModelProfile, OptimizerKind, SplitConfig
from sftsim.wireless import DeviceProfile, ServerProfile, ShareLevel, SnrModel

__all__ = [
    "AccuracyPolicy",
    "CompressionBounds",
    "PlanDefaults",
    "Scenario",
    "ScenarioError",
    "SimulatorSettings",
    "default_scenario_dict",
    "load_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
]


class ScenarioError(ValueError):
    """Validation failure with a field-path diagnostic."""


@dataclass(frozen=True)
class CompressionBounds:
    rho_min: float = 0.05
    rho_max: float = 1.0
    levels_min: int = 2
    levels_max: int = 32


@dataclass(frozen=True)
class AccuracyPolicy:
    """Threshold policy: fixed value, or best-on-grid minus a margin."""

    margin_points: float = 2.0
    threshold_points: float | None = None
    surface_json: str | None = None
    predictor_json: str | None = None
    accuracy_csv: str | None = None


@dataclass(frozen=True)
class SimulatorSettings:
    task_rows: int = 64
    init_std: float = 0.02
    lr_device: float = 1e-3
    lr_server: float = 1e-3


@dataclass(frozen=True)
class PlanDefaults:
    """Optional pinned configuration used when simulating without planning."""

    cut_layer: int | None = None
    keep_rate: float | None = None
    levels: int | None = None


@dataclass(frozen=True)
class Scenario:
    profile: ModelProfile
    split: SplitConfig
    devices: tuple[DeviceProfile, ...]
    server: ServerProfile
    compression: CompressionBounds
    accuracy: AccuracyPolicy
    memory_cap_bytes: float
    planner: PlannerSettings
    simulator: SimulatorSettings
    plan_defaults: PlanDefaults
    seed: int

    def with_overrides(self, rounds: int | None = None, devices: int | None = None,
                       seed: int | None = None) -> "Scenario":
        out = self
        if rounds is not None:
            out = replace(out, split=replace(out.split, rounds=rounds))
        if devices is not None:
            if not 1 <= devices <= len(out.devices):
                raise ScenarioError(f"--devices must be between 1 and {len(out.devices)}")
            out = replace(out, devices=out.devices[:devices])
        if seed is not None:
            out = replace(out, seed=seed)
        return out


class _Checker:
    """Tiny strict-schema walker producing field-path diagnostics."""

    def __init__(self, data: dict, path: str = ""):
        if not isinstance(data, dict):
            raise ScenarioError(f"{path or 'scenario'}: expected an object")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def _full(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, required=True, default=None, positive=False, nonneg=False):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ScenarioError(f"{self._full(key)}: missing required field")
            return default
        value = self.data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            raise ScenarioError(f"{self._full(key)}: expected {kind.__name__}")
        if positive and not value > 0:
            raise ScenarioError(f"{self._full(key)}: must be > 0")
        if nonneg and value < 0:
            raise ScenarioError(f"{self._full(key)}: must be >= 0")
        return value

    def sub(self, key: str, required=True) -> "_Checker | None":
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ScenarioError(f"{self._full(key)}: missing required section")
            return None
        return _Checker(self.data[key], self._full(key))

    def finish(self) -> None:
        unknown = set(self.data) - self.seen
        if unknown:
            where = self.path or "scenario"
            raise ScenarioError(f"{where}: unknown field(s) {sorted(unknown)}")


def _parse_snr(c: "_Checker | None") -> SnrModel:
    if c is None:
        return SnrModel()
    model = SnrModel(
        kind=c.get("kind", str, required=False, default="uniform_db"),
        low_db=c.get("low_db", float, required=False, default=10.0),
        high_db=c.get("high_db", float, required=False, default=20.0),
        nominal_db=c.get("nominal_db", float, required=False, default=17.0),
    )
    c.finish()
    return model


def scenario_from_dict(data: dict) -> Scenario:
    root = _Checker(data)
    seed = root.get("seed", int, required=False, default=2024, nonneg=True)

    m = root.sub("model")
    profile = ModelProfile(
        num_layers=m.get("num_layers", int, positive=True),
        embed_dim=m.get("embed_dim", int, positive=True),
        num_heads=m.get("num_heads", int, positive=True),
        num_tokens=m.get("num_tokens", int, positive=True),
        patch_size=m.get("patch_size", int, positive=True),
        img_channels=m.get("img_channels", int, positive=True),
        num_classes=m.get("num_classes", int, positive=True),
        lora_rank=m.get("lora_rank", int, nonneg=True),
        mlp_dim=m.get("mlp_dim", int, required=False, default=0, nonneg=True),
        bytes_per_param=m.get("bytes_per_param", int, required=False, default=4),
        optimizer_kind=OptimizerKind(m.get("optimizer", str, required=False, default="sgd")),
    )
    m.finish()

    s = root.sub("split")
    split = SplitConfig(
        cut_layer=s.get("cut_layer", int, required=False, default=1, positive=True),
        batch=s.get("batch", int, positive=True),
        local_epochs=s.get("local_epochs", int, required=False, default=1, positive=True),
        rounds=s.get("rounds", int, required=False, default=1, positive=True),
    )
    if not 0 < split.cut_layer < profile.num_layers:
        raise ScenarioError("split.cut_layer: must satisfy 0 < cut_layer < model.num_layers")
    s.finish()

    root.seen.add("devices")
    raw_devices = data.get("devices")
    if not isinstance(raw_devices, list) or not raw_devices:
        raise ScenarioError("devices: expected a non-empty list")
    devices = []
    ids = set()
    for i, item in enumerate(raw_devices):
        c = _Checker(item, f"devices[{i}]")
        dev = DeviceProfile(
            id=c.get("id", str),
            gpu_freq_hz=c.get("gpu_freq_hz", float, positive=True),
            cores=c.get("cores", int, positive=True),
            flops_per_cycle=c.get("flops_per_cycle", int, positive=True),
            bandwidth_max_hz=c.get("bandwidth_max_hz", float, positive=True),
            dataset_size=c.get("dataset_size", int, positive=True),
            snr_model=_parse_snr(c.sub("snr", required=False)),
        )
        if dev.id in ids:
            raise ScenarioError(f"devices[{i}].id: duplicate id {dev.id!r}")
        ids.add(dev.id)
        devices.append(dev)
        c.finish()

    sv = root.sub("server")
    server = ServerProfile(
        gpu_freq_hz=sv.get("gpu_freq_hz", float, positive=True),
        cores=sv.get("cores", int, positive=True),
        flops_per_cycle=sv.get("flops_per_cycle", int, positive=True),
        total_bandwidth_hz=sv.get("total_bandwidth_hz", float, positive=True),
        broadcast_bandwidth_hz=sv.get("broadcast_bandwidth_hz", float, positive=True),
        snr_downlink_db=sv.get("snr_downlink_db", float, required=False, default=17.0),
        share_policy=ShareLevel(sv.get("share_policy", str, required=False, default="equal_share")),
    )
    sv.finish()

    comp = root.sub("compression", required=False)
    if comp is None:
        bounds = CompressionBounds()
    else:
        bounds = CompressionBounds(
            rho_min=comp.get("rho_min", float, required=False, default=0.05, positive=True),
            rho_max=comp.get("rho_max", float, required=False, default=1.0, positive=True),
            levels_min=comp.get("levels_min", int, required=False, default=2, positive=True),
            levels_max=comp.get("levels_max", int, required=False, default=32, positive=True),
        )
        comp.finish()
    if not bounds.rho_min <= bounds.rho_max <= 1.0:
        raise ScenarioError("compression: need rho_min <= rho_max <= 1")
    if bounds.levels_min > bounds.levels_max:
        raise ScenarioError("compression: need levels_min <= levels_max")

    acc = root.sub("accuracy", required=False)
    if acc is None:
        policy = AccuracyPolicy()
    else:
        policy = AccuracyPolicy(
            margin_points=acc.get("margin_points", float, required=False, default=2.0, nonneg=True),
            threshold_points=acc.get("threshold_points", float, required=False, default=None),
            surface_json=acc.get("surface_json", str, required=False, default=None),
            predictor_json=acc.get("predictor_json", str, required=False, default=None),
            accuracy_csv=acc.get("accuracy_csv", str, required=False, default=None),
        )
        acc.finish()

    memory_cap = root.get("memory_cap_bytes", float, positive=True)

    pl = root.sub("planner", required=False)
    if pl is None:
        planner = PlannerSettings()
    else:
        planner = PlannerSettings(
            step_size=pl.get("step_size", float, required=False, default=0.5, positive=True),
            tolerance=pl.get("tolerance", float, required=False, default=1e-4, positive=True),
            max_iterations=pl.get("max_iterations", int, required=False, default=60, positive=True),
            search_mode=pl.get("search_mode", str, required=False, default="grid"),
            rho_grid_step=pl.get("rho_grid_step", float, required=False, default=0.05, positive=True),
            level_grid=tuple(
                int(x) for x in pl.get("level_grid", list, required=False, default=[2, 4, 8, 16, 32])
            ),
            trust_region_fraction=pl.get(
                "trust_region_fraction", float, required=False, default=0.1, positive=True
            ),
            sqp_tolerance=pl.get("sqp_tolerance", float, required=False, default=1e-9, positive=True),
            sqp_max_iterations=pl.get("sqp_max_iterations", int, required=False, default=100, positive=True),
        )
        pl.finish()

    sim = root.sub("simulator", required=False)
    if sim is None:
        simulator = SimulatorSettings()
    else:
        simulator = SimulatorSettings(
            task_rows=sim.get("task_rows", int, required=False, default=64, positive=True),
            init_std=sim.get("init_std", float, required=False, default=0.02, positive=True),
            lr_device=sim.get("lr_device", float, required=False, default=1e-3, nonneg=True),
            lr_server=sim.get("lr_server", float, required=False, default=1e-3, nonneg=True),
        )
        sim.finish()

    pd = root.sub("plan_defaults", required=False)
    if pd is None:
        plan_defaults = PlanDefaults()
    else:
        plan_defaults = PlanDefaults(
            cut_layer=pd.get("cut_layer", int, required=False, default=None),
            keep_rate=pd.get("keep_rate", float, required=False, default=None),
            levels=pd.get("levels", int, required=False, default=None),
        )
        pd.finish()

    root.finish()
    return Scenario(
        profile=profile,
        split=split,
        devices=tuple(devices),
        server=server,
        compression=bounds,
        accuracy=policy,
        memory_cap_bytes=memory_cap,
        planner=planner,
        simulator=simulator,
        plan_defaults=plan_defaults,
        seed=seed,
    )


def scenario_to_dict(scn: Scenario) -> dict:
    """Inverse of :func:`scenario_from_dict` (write-then-read round-trips)."""
    return {
        "seed": scn.seed,
        "model": {
            "num_layers": scn.profile.num_layers,
            "embed_dim": scn.profile.embed_dim,
            "num_heads": scn.profile.num_heads,
            "num_tokens": scn.profile.num_tokens,
            "patch_size": scn.profile.patch_size,
            "img_channels": scn.profile.img_channels,
            "num_classes": scn.profile.num_classes,
            "lora_rank": scn.profile.lora_rank,
            "mlp_dim": scn.profile.mlp_dim,
            "bytes_per_param": scn.profile.bytes_per_param,
            "optimizer": scn.profile.optimizer_kind.value,
        },
        "split": {
            "cut_layer": scn.split.cut_layer,
            "batch": scn.split.batch,
            "local_epochs": scn.split.local_epochs,
            "rounds": scn.split.rounds,
        },
        "devices": [
            {
                "id": d.id,
                "gpu_freq_hz": d.gpu_freq_hz,
                "cores": d.cores,
                "flops_per_cycle": d.flops_per_cycle,
                "bandwidth_max_hz": d.bandwidth_max_hz,
                "dataset_size": d.dataset_size,
                "snr": {
                    "kind": d.snr_model.kind,
                    "low_db": d.snr_model.low_db,
                    "high_db": d.snr_model.high_db,
                    "nominal_db": d.snr_model.nominal_db,
                },
            }
            for d in scn.devices
        ],
        "server": {
            "gpu_freq_hz": scn.server.gpu_freq_hz,
            "cores": scn.server.cores,
            "flops_per_cycle": scn.server.flops_per_cycle,
            "total_bandwidth_hz": scn.server.total_bandwidth_hz,
            "broadcast_bandwidth_hz": scn.server.broadcast_bandwidth_hz,
            "snr_downlink_db": scn.server.snr_downlink_db,
            "share_policy": scn.server.share_policy.value,
        },
        "compression": {
            "rho_min": scn.compression.rho_min,
            "rho_max": scn.compression.rho_max,
            "levels_min": scn.compression.levels_min,
            "levels_max": scn.compression.levels_max,
        },
        "accuracy": {
            "margin_points": scn.accuracy.margin_points,
            **({"threshold_points": scn.accuracy.threshold_points} if scn.accuracy.threshold_points is not None else {}),
            **({"surface_json": scn.accuracy.surface_json} if scn.accuracy.surface_json else {}),
            **({"predictor_json": scn.accuracy.predictor_json} if scn.accuracy.predictor_json else {}),
            **({"accuracy_csv": scn.accuracy.accuracy_csv} if scn.accuracy.accuracy_csv else {}),
        },
        "memory_cap_bytes": scn.memory_cap_bytes,
        "planner": {
            "step_size": scn.planner.step_size,
            "tolerance": scn.planner.tolerance,
            "max_iterations": scn.planner.max_iterations,
            "search_mode": scn.planner.search_mode,
            "rho_grid_step": scn.planner.rho_grid_step,
            "level_grid": list(scn.planner.level_grid),
            "trust_region_fraction": scn.planner.trust_region_fraction,
            "sqp_tolerance": scn.planner.sqp_tolerance,
            "sqp_max_iterations": scn.planner.sqp_max_iterations,
        },
        "simulator": {
            "task_rows": scn.simulator.task_rows,
            "init_std": scn.simulator.init_std,
            "lr_device": scn.simulator.lr_device,
            "lr_server": scn.simulator.lr_server,
        },
        "plan_defaults": {
            key: value
            for key, value in (
                ("cut_layer", scn.plan_defaults.cut_layer),
                ("keep_rate", scn.plan_defaults.keep_rate),
                ("levels", scn.plan_defaults.levels),
            )
            if value is not None
        },
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    return scenario_from_dict(data)


def default_scenario_dict(num_devices: int = 8, seed: int = 2024) -> dict:
    """Reference setup: ViT-base, 8 Jetson-class devices, 30 MHz shared band."""
    rng_freqs = [0.5e9 + 0.125e9 * i for i in range(num_devices)]
    return {
        "seed": seed,
        "model": {
            "num_layers": 12,
            "embed_dim": 768,
            "num_heads": 12,
            "num_tokens": 197,
            "patch_size": 16,
            "img_channels": 3,
            "num_classes": 100,
            "lora_rank": 16,
            "bytes_per_param": 4,
            "optimizer": "sgd",
        },
        "split": {"cut_layer": 5, "batch": 64, "local_epochs": 1, "rounds": 20},
        "devices": [
            {
                "id": f"dev{i}",
                "gpu_freq_hz": rng_freqs[i],
                "cores": 256,
                "flops_per_cycle": 4,
                "bandwidth_max_hz": 30.0e6,
                "dataset_size": 6250,
                "snr": {"kind": "uniform_db", "low_db": 10.0, "high_db": 20.0, "nominal_db": 17.0},
            }
            for i in range(num_devices)
        ],
        "server": {
            "gpu_freq_hz": 40.0e9,
            "cores": 2048,
            "flops_per_cycle": 4,
            "total_bandwidth_hz": 30.0e6,
            "broadcast_bandwidth_hz": 30.0e6,
            "snr_downlink_db": 17.0,
            "share_policy": "equal_share",
        },
        "compression": {"rho_min": 0.05, "rho_max": 1.0, "levels_min": 2, "levels_max": 32},
        "accuracy": {"margin_points": 2.0},
        "memory_cap_bytes": 4 * 1024**3,
        "simulator": {"task_rows": 64, "init_std": 0.02, "lr_device": 1e-3, "lr_server": 1e-3},
        "plan_defaults": {"cut_layer": 5, "keep_rate": 0.2, "levels": 8},
    }
