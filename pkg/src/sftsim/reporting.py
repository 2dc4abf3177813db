"""Comparison tables derived from scenarios and session reports.

Three views, mirroring the usual evaluation plots: device memory across
fine-tuning schemes, round delay across bandwidth-allocation policies over a
band sweep, and communication volume with and without compression.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from sftsim.planner import Plan, nominal_channel, solve_bandwidth, uniform_allocation
from sftsim.profiles import memory_device
from sftsim.scenario import Scenario
from sftsim.simulator import SessionReport
from sftsim.wireless import round_delay

__all__ = [
    "bandwidth_sweep_rows",
    "memory_comparison_rows",
    "overhead_rows",
    "random_allocation",
]


def memory_comparison_rows(scenario: Scenario, plan: Plan) -> list[dict]:
    """Device-side memory per scheme; the full-model row is the FL baseline."""
    profile = scenario.profile
    split_plan = replace(scenario.split, cut_layer=plan.cut_layer)
    split_full = replace(scenario.split, cut_layer=profile.num_layers)
    mem_sft = memory_device(profile, split_plan)
    mem_fl = memory_device(profile, split_full)
    rows = [
        {
            "scheme": "fl_full_model",
            "device_blocks": profile.num_layers,
            "memory_bytes": mem_fl,
            "ratio_vs_split": mem_fl / mem_sft,
        },
        {
            "scheme": "sl_split",
            "device_blocks": plan.cut_layer,
            "memory_bytes": mem_sft,
            "ratio_vs_split": 1.0,
        },
        {
            "scheme": "sft_proposed",
            "device_blocks": plan.cut_layer,
            "memory_bytes": mem_sft,
            "ratio_vs_split": 1.0,
        },
    ]
    return rows


def random_allocation(devices, total_hz: float, seed: int) -> dict[str, float]:
    """Random feasible split of the band (Dirichlet draw projected onto the caps)."""
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xA110C])
    caps = np.array([d.bandwidth_max_hz for d in devices], dtype=np.float64)
    if caps.sum() < total_hz * (1 - 1e-12):
        raise ValueError("infeasible allocation: bandwidth caps sum below the total band")
    share = rng.dirichlet(np.ones(len(devices))) * total_hz
    for _ in range(64):
        over = share - caps
        excess = over[over > 0].sum()
        if excess <= total_hz * 1e-12:
            break
        share = np.minimum(share, caps)
        headroom = caps - share
        share += excess * (headroom / headroom.sum())
    share = np.minimum(share, caps)
    return {d.id: float(share[i]) for i, d in enumerate(devices)}


def _max_round_delay(scenario, plan, beta, allocation, channel, server):
    split = replace(scenario.split, cut_layer=plan.cut_layer)
    totals = [
        round_delay(
            dev, plan.cut_layer, beta, allocation[dev.id], scenario.profile, split,
            channel, server, channel.round_index,
            num_active=len(scenario.devices), queue_position=pos,
        ).total
        for pos, dev in enumerate(scenario.devices)
    ]
    return max(totals)


def bandwidth_sweep_rows(scenario: Scenario, plan: Plan, beta: float, points: int = 6) -> list[dict]:
    """Round delay under uniform / random / optimized allocation over a band sweep."""
    base_total = scenario.server.total_bandwidth_hz
    rows = []
    for frac_idx in range(1, points + 1):
        total = base_total * frac_idx / points
        server = replace(scenario.server, total_bandwidth_hz=total)
        channel = nominal_channel(scenario.devices, server)
        split = replace(scenario.split, cut_layer=plan.cut_layer)

        uniform = uniform_allocation(scenario.devices, total)
        random_alloc = random_allocation(scenario.devices, total, scenario.seed + frac_idx)
        optimized = solve_bandwidth(
            scenario.devices, plan.cut_layer, beta, scenario.profile, split, channel,
            server, scenario.planner,
        ).allocation

        t_uniform = _max_round_delay(scenario, plan, beta, uniform, channel, server)
        t_random = _max_round_delay(scenario, plan, beta, random_alloc, channel, server)
        t_optimized = _max_round_delay(scenario, plan, beta, optimized, channel, server)
        rows.append(
            {
                "bandwidth_hz": total,
                "uniform_seconds": t_uniform,
                "random_seconds": t_random,
                "optimized_seconds": t_optimized,
                "reduction_vs_uniform_pct": 100.0 * (1.0 - t_optimized / t_uniform),
            }
        )
    return rows


def overhead_rows(report: SessionReport) -> list[dict]:
    """Bytes with and without compression, per stream and combined."""
    uncompressed_one_way = report.uncompressed_activation_bytes
    rows = [
        {
            "stream": "activations_uplink",
            "compressed_bytes": report.uplink_activation_bytes,
            "uncompressed_bytes": uncompressed_one_way,
            "ratio": uncompressed_one_way / max(report.uplink_activation_bytes, 1),
        },
        {
            "stream": "gradients_downlink",
            "compressed_bytes": report.downlink_gradient_bytes,
            "uncompressed_bytes": uncompressed_one_way,
            "ratio": uncompressed_one_way / max(report.downlink_gradient_bytes, 1),
        },
    ]
    compressible = report.uplink_activation_bytes + report.downlink_gradient_bytes
    rows.append(
        {
            "stream": "compressible_total",
            "compressed_bytes": compressible,
            "uncompressed_bytes": 2 * uncompressed_one_way,
            "ratio": 2 * uncompressed_one_way / max(compressible, 1),
        }
    )
    rows.append(
        {
            "stream": "session_total_with_adapters",
            "compressed_bytes": report.uplink_bytes + report.downlink_bytes,
            "uncompressed_bytes": 2 * uncompressed_one_way
            + (report.uplink_bytes - report.uplink_activation_bytes)
            + (report.downlink_bytes - report.downlink_gradient_bytes),
            "ratio": (
                2 * uncompressed_one_way
                + (report.uplink_bytes - report.uplink_activation_bytes)
                + (report.downlink_bytes - report.downlink_gradient_bytes)
            )
            / max(report.uplink_bytes + report.downlink_bytes, 1),
        }
    )
    return rows
