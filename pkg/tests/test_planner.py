"""Two-timescale optimizer tests: dual search, SQP allocation, oracles."""

from dataclasses import replace

import numpy as np
import pytest

from sftsim.compression.surrogate import AccuracySurface, fit_accuracy_surface
from sftsim.planner import (
    Multipliers,
    PlannerContext,
    PlannerSettings,
    brute_force_bandwidth,
    brute_force_config,
    constraint_residuals,
    lagrangian,
    nominal_channel,
    optimize_config,
    resolve_accuracy_threshold,
    solve_bandwidth,
    uniform_allocation,
)
from sftsim.profiles import ModelProfile, SplitConfig, memory_device
from sftsim.wireless import DeviceProfile, round_delay

from conftest import LEVEL_GRID, RHO_GRID, make_devices, make_server


@pytest.fixture(scope="module")
def vit(vit_profile):
    return vit_profile


def make_context(rate_predictor, accuracy_surface, num_devices=4, memory_cap=4 * 2**30,
                 margin=2.0, seed=0, server=None, threshold=None):
    devices = make_devices(num_devices, seed=seed)
    server = server or make_server()
    profile = ModelProfile(
        num_layers=12, embed_dim=768, num_heads=12, num_tokens=197,
        patch_size=16, img_channels=3, num_classes=100, lora_rank=16,
    )
    split = SplitConfig(cut_layer=5, batch=64, local_epochs=1, rounds=20)
    if threshold is None:
        threshold = resolve_accuracy_threshold(accuracy_surface, RHO_GRID, LEVEL_GRID, margin)
    return PlannerContext(
        profile=profile,
        split=split,
        devices=devices,
        server=server,
        predictor=rate_predictor,
        surface=accuracy_surface,
        accuracy_threshold=threshold,
        memory_cap_bytes=memory_cap,
    )


class TestLagrangian:
    def test_zero_multipliers_equal_delay(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface)
        labels = ("accuracy",) + tuple(f"memory[{d.id}]" for d in ctx.devices) + (
            "rho_min", "rho_max", "levels_min", "levels_max", "cut_max", "cut_min",
        )
        lam = Multipliers(values=np.zeros(len(labels)), labels=labels)
        beta = ctx.predictor.predict(0.2, 8.0)
        assert lagrangian(0.2, 8, 3, lam, ctx) == pytest.approx(
            ctx.config_delay(3, beta), rel=1e-12
        )

    def test_feasible_point_bound(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface)
        rng = np.random.default_rng(1)
        labels = ("accuracy",) + tuple(f"memory[{d.id}]" for d in ctx.devices) + (
            "rho_min", "rho_max", "levels_min", "levels_max", "cut_max", "cut_min",
        )
        lam = Multipliers(values=rng.uniform(0, 2, len(labels)), labels=labels)
        rho, lev, cut = 0.4, 8, 2
        value = lagrangian(rho, lev, cut, lam, ctx)
        g = constraint_residuals(rho, lev, cut, ctx)
        tau = ctx.config_delay(cut, ctx.predictor.predict(rho, float(lev)))
        assert value >= tau - float(lam.values @ np.maximum(g, 0.0)) - 1e-12

    def test_hand_computed_sum(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface)
        rng = np.random.default_rng(2)
        labels = ("accuracy",) + tuple(f"memory[{d.id}]" for d in ctx.devices) + (
            "rho_min", "rho_max", "levels_min", "levels_max", "cut_max", "cut_min",
        )
        values = rng.uniform(0, 3, len(labels))
        lam = Multipliers(values=values, labels=labels)
        rho, lev, cut = 0.35, 16, 7
        # Hand computation with the documented normalization.
        acc = ctx.surface.predict(rho, float(lev))
        mem = memory_device(ctx.profile, replace(ctx.split, cut_layer=cut))
        g = [acc - ctx.accuracy_threshold]
        g += [(ctx.memory_cap_bytes - mem) / ctx.memory_cap_bytes] * len(ctx.devices)
        g += [
            (rho - 0.05) / 0.95, (1.0 - rho) / 0.95,
            (lev - 2) / 30.0, (32 - lev) / 30.0,
            (12 - cut) / 12.0, cut / 12.0,
        ]
        tau = ctx.config_delay(cut, ctx.predictor.predict(rho, float(lev)))
        expected = tau - float(np.dot(values, np.asarray(g)))
        assert lagrangian(rho, lev, cut, lam, ctx) == pytest.approx(expected, rel=1e-12)

    def test_multiplier_nonnegativity_enforced(self):
        with pytest.raises(ValueError):
            Multipliers(values=np.array([-0.1]), labels=("accuracy",))


class TestOptimizeConfig:
    def test_memory_cap_limits_cut(self, rate_predictor, accuracy_surface, vit):
        cap = memory_device(vit, SplitConfig(cut_layer=5, batch=64)) + 1
        ctx = make_context(rate_predictor, accuracy_surface, memory_cap=cap)
        result = optimize_config(ctx)
        assert result.feasible
        assert result.cut_layer <= 5

    def test_flat_surface_picks_cheapest_config(self, rate_predictor):
        flat = AccuracySurface(coefficients=np.array([80.0] + [0.0] * 9), fit_mse=0.0)
        ctx = make_context(rate_predictor, flat, threshold=70.0)
        result = optimize_config(ctx)
        assert result.feasible
        assert result.rho == pytest.approx(0.05)
        assert result.levels == 2
        assert result.converged

    def test_matches_brute_force_on_random_instances(self, rate_predictor, accuracy_surface):
        rng = np.random.default_rng(5)
        for trial in range(6):
            margin = float(rng.uniform(1.0, 3.0))
            cap_blocks = int(rng.integers(2, 12))
            cap = memory_device(
                ModelProfile(num_layers=12, embed_dim=768, num_heads=12, num_tokens=197,
                             patch_size=16, img_channels=3, num_classes=100, lora_rank=16),
                SplitConfig(cut_layer=cap_blocks, batch=64),
            ) + 1
            ctx = make_context(
                rate_predictor, accuracy_surface, num_devices=int(rng.integers(2, 6)),
                memory_cap=cap, margin=margin, seed=trial,
            )
            result = optimize_config(ctx)
            oracle = brute_force_config(ctx)
            assert result.feasible == (oracle is not None)
            if oracle is not None:
                assert result.objective_seconds <= oracle["objective_seconds"] * 1.02
                g = constraint_residuals(result.rho, result.levels, result.cut_layer, ctx)
                assert g.min() >= -1e-6

    def test_infeasible_reports_violations(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface, threshold=1e9)
        result = optimize_config(ctx)
        assert not result.feasible
        assert "accuracy" in result.violations

    def test_multipliers_stay_nonnegative_through_trace(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface, margin=1.0)
        result = optimize_config(ctx)
        for entry in result.trace:
            assert np.all(entry["lambdas"] >= 0)
        assert np.all(result.multipliers.values >= 0)

    def test_gradient_mode_finds_feasible_plan(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface, num_devices=2)
        settings = PlannerSettings(search_mode="gradient", max_iterations=4,
                                   gradient_iterations=12)
        result = optimize_config(ctx, settings)
        assert result.feasible
        g = constraint_residuals(result.rho, result.levels, result.cut_layer, ctx)
        assert g.min() >= -1e-9


class TestBruteForceConfig:
    def test_single_point_grid(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface)
        ctx = replace(ctx, rho_bounds=(0.2, 0.2), level_bounds=(8, 8))
        settings = PlannerSettings(rho_grid_step=0.05, level_grid=(8,))
        oracle = brute_force_config(ctx, settings)
        assert oracle["rho"] == pytest.approx(0.2)
        assert oracle["levels"] == 8

    def test_infeasible_grid_returns_none(self, rate_predictor, accuracy_surface):
        ctx = make_context(rate_predictor, accuracy_surface, threshold=1e9)
        assert brute_force_config(ctx) is None


class TestUniformAllocation:
    def test_plain_split(self):
        devices = make_devices(4)
        alloc = uniform_allocation(devices, 20e6)
        assert all(v == pytest.approx(5e6) for v in alloc.values())

    def test_waterfill_against_caps(self):
        devices = list(make_devices(3))
        devices[0] = replace(devices[0], bandwidth_max_hz=2e6)
        alloc = uniform_allocation(tuple(devices), 20e6)
        assert alloc["dev0"] == pytest.approx(2e6)
        assert alloc["dev1"] == pytest.approx(9e6)
        assert sum(alloc.values()) == pytest.approx(20e6)

    def test_infeasible_caps(self):
        devices = make_devices(2, bandwidth_cap=1e6)
        with pytest.raises(ValueError, match="infeasible allocation"):
            uniform_allocation(devices, 1e7)


class TestSolveBandwidth:
    def test_identical_devices_exact_uniform(self, vit, table_split):
        devices = tuple(
            DeviceProfile(id=f"d{i}", gpu_freq_hz=1e9, cores=256, flops_per_cycle=4,
                          bandwidth_max_hz=3e7, dataset_size=500)
            for i in range(5)
        )
        server = make_server()
        channel = nominal_channel(devices, server)
        result = solve_bandwidth(devices, 5, 0.1, vit, table_split, channel, server)
        share = server.total_bandwidth_hz / 5
        for value in result.allocation.values():
            assert abs(value - share) / share < 1e-6

    def test_two_device_grid_oracle(self, vit, table_split):
        rng = np.random.default_rng(8)
        for trial in range(10):
            devices = make_devices(2, seed=100 + trial, freq_range=(0.3e9, 2.0e9))
            server = make_server()
            channel = nominal_channel(devices, server)
            beta = float(rng.uniform(0.02, 0.9))
            result = solve_bandwidth(devices, 5, beta, vit, table_split, channel, server)

            total = server.total_bandwidth_hz
            b1 = np.linspace(total * 1e-4, total * (1 - 1e-4), 10_000)
            split = replace(table_split, cut_layer=5)

            def tau(dev, pos, bw):
                return round_delay(dev, 5, beta, bw, vit, split, channel, server, 2,
                                   num_active=2, queue_position=pos).total

            # Hyperbola coefficients via two evaluations (independent of solver).
            def coeffs(dev, pos):
                t1, t2 = tau(dev, pos, total / 4), tau(dev, pos, total / 2)
                q = (t1 - t2) / (4 / total - 2 / total)
                return t2 - q * 2 / total, q

            p1, q1 = coeffs(devices[0], 0)
            p2, q2 = coeffs(devices[1], 1)
            grid_best = np.min(np.maximum(p1 + q1 / b1, p2 + q2 / (total - b1)))
            assert result.objective_seconds <= grid_best * 1.005

    def test_four_device_lattice_oracle(self, vit, table_split):
        devices = make_devices(4, seed=41, freq_range=(0.4e9, 1.8e9))
        server = make_server()
        channel = nominal_channel(devices, server)
        result = solve_bandwidth(devices, 5, 0.15, vit, table_split, channel, server)
        oracle = brute_force_bandwidth(devices, 5, 0.15, vit, table_split, channel, server)
        assert result.objective_seconds <= oracle["objective_seconds"] * 1.01

    def test_simplex_sum_and_caps_exact(self, vit, table_split):
        devices = list(make_devices(4, seed=2))
        devices[1] = replace(devices[1], bandwidth_max_hz=4e6)
        devices = tuple(devices)
        server = make_server()
        channel = nominal_channel(devices, server)
        result = solve_bandwidth(devices, 5, 0.3, vit, table_split, channel, server)
        total = sum(result.allocation.values())
        assert abs(total - server.total_bandwidth_hz) / server.total_bandwidth_hz < 1e-9
        for dev in devices:
            assert result.allocation[dev.id] <= dev.bandwidth_max_hz * (1 + 1e-12)

    def test_never_worse_than_uniform(self, vit, table_split):
        rng = np.random.default_rng(9)
        for trial in range(20):
            devices = make_devices(int(rng.integers(2, 7)), seed=200 + trial,
                                   freq_range=(0.2e9, 2.5e9))
            server = make_server()
            channel = nominal_channel(devices, server)
            beta = float(rng.uniform(0.02, 1.0))
            result = solve_bandwidth(devices, int(rng.integers(1, 12)), beta, vit,
                                     table_split, channel, server)
            alloc_u = uniform_allocation(devices, server.total_bandwidth_hz)
            cut = 5
            uniform_worst = max(
                round_delay(d, cut, beta, alloc_u[d.id], vit, table_split, channel, server, 2,
                            num_active=len(devices), queue_position=i).total
                for i, d in enumerate(devices)
            )
            cut_result = solve_bandwidth(devices, cut, beta, vit, table_split, channel, server)
            assert cut_result.objective_seconds <= uniform_worst * (1 + 1e-12)

    def test_infeasible_caps_rejected(self, vit, table_split):
        devices = make_devices(2, bandwidth_cap=1e6)
        server = make_server()
        channel = nominal_channel(devices, server)
        with pytest.raises(ValueError, match="infeasible allocation"):
            solve_bandwidth(devices, 5, 0.1, vit, table_split, channel, server)
