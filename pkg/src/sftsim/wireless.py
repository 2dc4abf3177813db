"""Link-rate model and the seven-phase per-round delay decomposition.

Phases of one fine-tuning round for one device:

    td  block / adapter distribution (broadcast; full payload on round 1)
    cc  device-side forward computation
    it  compressed activation uplink
    sc  server-side forward + backward computation
    gt  compressed gradient downlink
    du  device-side backward computation
    lt  adapter upload

The inner phases (cc, it, sc, gt, du) repeat once per local epoch; td and lt
happen once per round. Payloads enter in bytes and are converted to bits
exactly once, at the link-rate boundary here. The round delay is the maximum
over devices, and the session delay the sum of round maxima.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from sftsim.profiles import (
    ModelProfile,
    SplitConfig,
    flops_device_bp,
    flops_device_fp,
    flops_server_bp,
    flops_server_fp,
    payload_sizes,
)

__all__ = [
    "ChannelState",
    "DelayBreakdown",
    "DeviceProfile",
    "ServerProfile",
    "ShareLevel",
    "SnrModel",
    "compute_delay",
    "draw_channel",
    "link_rate",
    "round_delay",
    "round_delay_bandwidth_grad",
    "session_delay",
    "snr_db_to_linear",
]


def snr_db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class SnrModel:
    """Per-round SNR draw specification, in dB.

    ``uniform_db`` draws uniformly in [low_db, high_db]; ``fixed_db`` always
    returns ``nominal_db``. The nominal value is what the large-timescale
    planner evaluates against.
    """

    kind: str = "uniform_db"
    low_db: float = 10.0
    high_db: float = 20.0
    nominal_db: float = 17.0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform_db", "fixed_db"):
            raise ValueError(f"unknown snr model kind: {self.kind}")
        if self.low_db > self.high_db:
            raise ValueError("low_db must not exceed high_db")

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed_db":
            return snr_db_to_linear(self.nominal_db)
        return snr_db_to_linear(rng.uniform(self.low_db, self.high_db))

    @property
    def nominal_linear(self) -> float:
        return snr_db_to_linear(self.nominal_db)


@dataclass(frozen=True)
class DeviceProfile:
    """Compute and link capability of one device."""

    id: str
    gpu_freq_hz: float
    cores: int
    flops_per_cycle: int
    bandwidth_max_hz: float
    dataset_size: int
    snr_model: SnrModel = field(default_factory=SnrModel)

    def __post_init__(self) -> None:
        if min(self.gpu_freq_hz, self.cores, self.flops_per_cycle, self.bandwidth_max_hz) <= 0:
            raise ValueError(f"device {self.id}: compute and bandwidth figures must be positive")
        if self.dataset_size < 1:
            raise ValueError(f"device {self.id}: dataset_size must be >= 1")

    @property
    def flops_per_second(self) -> float:
        return self.gpu_freq_hz * self.cores * self.flops_per_cycle


class ShareLevel(str, Enum):
    """How the shared server GPU is attributed to concurrent device sessions."""

    EQUAL_SHARE = "equal_share"
    SEQUENTIAL_QUEUE = "sequential_queue"


@dataclass(frozen=True)
class ServerProfile:
    gpu_freq_hz: float
    cores: int
    flops_per_cycle: int
    total_bandwidth_hz: float
    broadcast_bandwidth_hz: float
    snr_downlink_db: float = 17.0
    share_policy: ShareLevel = ShareLevel.EQUAL_SHARE

    def __post_init__(self) -> None:
        if min(
            self.gpu_freq_hz,
            self.cores,
            self.flops_per_cycle,
            self.total_bandwidth_hz,
            self.broadcast_bandwidth_hz,
        ) <= 0:
            raise ValueError("server figures must be positive")

    @property
    def snr_downlink_linear(self) -> float:
        return snr_db_to_linear(self.snr_downlink_db)


@dataclass(frozen=True)
class ChannelState:
    """Per-round SNR realizations (linear scale), keyed by device id."""

    round_index: int
    snr_up: dict[str, float]
    snr_down: dict[str, float]

    def __post_init__(self) -> None:
        for table in (self.snr_up, self.snr_down):
            for dev, snr in table.items():
                if snr < 0:
                    raise ValueError(f"negative SNR for device {dev}")


def draw_channel(devices, server: ServerProfile, round_index: int, seed) -> ChannelState:
    """Seed-deterministic channel realization for one round.

    Uplink SNRs follow each device's model; the downlink SNR is the server's
    nominal value (the downlink is rate-limited by the same allocated band).
    """
    snr_up = {}
    snr_down = {}
    for i, dev in enumerate(devices):
        rng = np.random.default_rng([_seed_int(seed), 0xC4A7, round_index, i])
        snr_up[dev.id] = dev.snr_model.draw(rng)
        snr_down[dev.id] = server.snr_downlink_linear
    return ChannelState(round_index=round_index, snr_up=snr_up, snr_down=snr_down)


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed) & 0xFFFFFFFFFFFFFFFF
    raise TypeError("seed must be an integer")


@dataclass(frozen=True)
class DelayBreakdown:
    """Seconds spent in each phase of one round for one device."""

    td: float
    cc: float
    it: float
    sc: float
    gt: float
    du: float
    lt: float

    @property
    def total(self) -> float:
        return self.td + self.cc + self.it + self.sc + self.gt + self.du + self.lt


def link_rate(bandwidth_hz: float, snr_linear: float) -> float:
    """Shannon rate in bits/s: bandwidth * log2(1 + SNR)."""
    if bandwidth_hz < 0 or snr_linear < 0:
        raise ValueError("bandwidth and SNR must be non-negative")
    return bandwidth_hz * math.log2(1.0 + snr_linear)


def compute_delay(flops: float, freq_hz: float, cores: int, flops_per_cycle: int) -> float:
    """Computation time in seconds: FLOPs / (frequency * cores * FLOPs-per-cycle)."""
    if flops < 0:
        raise ValueError("flops must be non-negative")
    denom = freq_hz * cores * flops_per_cycle
    if denom <= 0:
        raise ValueError("compute capability must be positive")
    return flops / denom


def _transfer(bits: float, rate: float, what: str) -> float:
    if bits == 0:
        return 0.0
    if rate <= 0:
        raise ValueError(f"unreachable device: zero link rate with pending {what}")
    return bits / rate


def round_delay(
    device: DeviceProfile,
    cut_layer: int,
    beta: float,
    bandwidth_hz: float,
    profile: ModelProfile,
    split: SplitConfig,
    channel: ChannelState,
    server: ServerProfile,
    round_index: int,
    num_active: int = 1,
    queue_position: int = 0,
    beta_down: float | None = None,
) -> DelayBreakdown:
    """Seven-phase delay of one round for one device.

    ``beta`` scales the activation/gradient payloads (``beta_down`` overrides
    the downlink fraction when the two directions measured differently).
    ``num_active`` sets the equal-share server frequency split;
    ``queue_position`` is the 0-based service order used by the sequential
    queue policy, where a device waits for every earlier pass.
    """
    if bandwidth_hz > device.bandwidth_max_hz * (1 + 1e-9):
        raise ValueError(f"device {device.id}: allocated bandwidth exceeds its cap")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    beta_dn = beta if beta_down is None else beta_down

    split_at = SplitConfig(
        cut_layer=cut_layer, batch=split.batch, local_epochs=split.local_epochs, rounds=split.rounds
    )
    payloads = payload_sizes(profile, split_at)

    broadcast_rate = link_rate(server.broadcast_bandwidth_hz, server.snr_downlink_linear)
    up_rate = link_rate(bandwidth_hz, channel.snr_up[device.id])
    down_rate = link_rate(bandwidth_hz, channel.snr_down[device.id])

    td_payload = payloads.block_dist if round_index == 1 else payloads.lora_dist
    td = _transfer(td_payload * 8, broadcast_rate, "block distribution")

    cc = compute_delay(
        flops_device_fp(profile, split_at), device.gpu_freq_hz, device.cores, device.flops_per_cycle
    )
    it = _transfer(beta * payloads.activation * 8, up_rate, "activation upload")

    server_flops = flops_server_fp(profile, split_at) + flops_server_bp(profile, split_at)
    if server.share_policy is ShareLevel.EQUAL_SHARE:
        sc = compute_delay(
            server_flops, server.gpu_freq_hz / max(num_active, 1), server.cores, server.flops_per_cycle
        )
    else:
        # Sequential service: wait for every earlier device's pass, then our own.
        single = compute_delay(server_flops, server.gpu_freq_hz, server.cores, server.flops_per_cycle)
        sc = single * (queue_position + 1)

    gt = _transfer(beta_dn * payloads.gradient * 8, down_rate, "gradient download")
    du = compute_delay(
        flops_device_bp(profile, split_at), device.gpu_freq_hz, device.cores, device.flops_per_cycle
    )
    lt = _transfer(payloads.lora_dist * 8, up_rate, "adapter upload")

    k = split.local_epochs
    return DelayBreakdown(td=td, cc=k * cc, it=k * it, sc=k * sc, gt=k * gt, du=k * du, lt=lt)


def round_delay_bandwidth_grad(
    device: DeviceProfile,
    cut_layer: int,
    beta: float,
    bandwidth_hz: float,
    profile: ModelProfile,
    split: SplitConfig,
    channel: ChannelState,
    beta_down: float | None = None,
) -> float:
    """Analytic d(total)/d(bandwidth): -(transmitted bits / spectral efficiency) / b^2.

    Only the uplink/downlink phases depend on the device's own allocation;
    broadcast and compute terms drop out.
    """
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive for the gradient")
    beta_dn = beta if beta_down is None else beta_down
    split_at = SplitConfig(
        cut_layer=cut_layer, batch=split.batch, local_epochs=split.local_epochs, rounds=split.rounds
    )
    payloads = payload_sizes(profile, split_at)
    eff_up = math.log2(1.0 + channel.snr_up[device.id])
    eff_dn = math.log2(1.0 + channel.snr_down[device.id])
    k = split.local_epochs
    bits_over_eff = 0.0
    up_bits = k * beta * payloads.activation * 8 + payloads.lora_dist * 8
    dn_bits = k * beta_dn * payloads.gradient * 8
    if up_bits:
        if eff_up <= 0:
            raise ValueError("unreachable device: zero uplink rate with pending payload")
        bits_over_eff += up_bits / eff_up
    if dn_bits:
        if eff_dn <= 0:
            raise ValueError("unreachable device: zero downlink rate with pending payload")
        bits_over_eff += dn_bits / eff_dn
    return -bits_over_eff / (bandwidth_hz * bandwidth_hz)


def session_delay(
    devices,
    cut_layer: int,
    beta: float,
    bandwidths,
    profile: ModelProfile,
    split: SplitConfig,
    channels,
    server: ServerProfile,
) -> float:
    """Total delay over all rounds: sum over rounds of the slowest device."""
    total = 0.0
    for channel in channels:
        per_device = [
            round_delay(
                dev,
                cut_layer,
                beta,
                bandwidths[dev.id],
                profile,
                split,
                channel,
                server,
                channel.round_index,
                num_active=len(devices),
                queue_position=pos,
            ).total
            for pos, dev in enumerate(devices)
        ]
        total += max(per_device)
    return total
