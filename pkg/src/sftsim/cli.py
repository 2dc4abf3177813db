"""Command-line entry point.

    sftsim plan      --scenario s.json [--out DIR] [--oracle] [--seed N]
    sftsim simulate  --scenario s.json [--plan plan.json] [--rounds N] [--devices N]
    sftsim calibrate [--measurements acc.csv] [--scenario s.json] [--out DIR]
    sftsim report    --scenario s.json --session report.json [...] [--out DIR]

Every subcommand is deterministic given the scenario and seed; outputs are
CSV and JSON files written atomically into the output directory. Exit code
is 0 iff no error occurred.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from sftsim.compression.surrogate import (
    calibrate_predictor,
    fit_accuracy_surface,
    load_accuracy_csv,
    measure_rate_grid,
)
from sftsim.planner import (
    Plan,
    brute_force_config,
    nominal_channel,
    optimize_config,
    solve_bandwidth,
)
from sftsim.reporting import bandwidth_sweep_rows, memory_comparison_rows, overhead_rows
from sftsim.scenario import Scenario, ScenarioError, load_scenario
from sftsim.simulator import (
    SimulationError,
    build_planner_context,
    run_session,
    save_adapter_checkpoint,
)

__all__ = ["main"]


def _atomic_write(path: Path, data: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_json(path: Path, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, fieldnames, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    _atomic_write(path, buf.getvalue())


def _load_scenario(args) -> Scenario:
    scn = load_scenario(args.scenario)
    return scn.with_overrides(
        rounds=getattr(args, "rounds", None),
        devices=getattr(args, "devices", None),
        seed=args.seed,
    )


def _trace_rows(result):
    labels = result.multipliers.labels
    rows = []
    for entry in result.trace:
        row = {
            "iteration": entry["iteration"],
            "lagrangian": entry["lagrangian"],
            "objective_seconds": entry["objective_seconds"],
            "max_violation": entry["max_violation"],
        }
        for label, lam in zip(labels, entry["lambdas"]):
            row[f"lambda[{label}]"] = lam
        rows.append(row)
    return rows


def cmd_plan(args) -> int:
    scenario = _load_scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    context = build_planner_context(scenario)
    result = optimize_config(context, scenario.planner)
    if not result.feasible:
        print("plan infeasible; most constrained candidate:", file=sys.stderr)
        print(
            f"  rho={result.rho} levels={result.levels} cut_layer={result.cut_layer}",
            file=sys.stderr,
        )
        for name, violation in result.violations.items():
            print(f"  violated {name}: {violation:.6g}", file=sys.stderr)
        return 1

    beta = float(context.predictor.predict(result.rho, float(result.levels)))
    channel = nominal_channel(scenario.devices, scenario.server)
    split = scenario.split
    bw = solve_bandwidth(
        scenario.devices, result.cut_layer, beta, scenario.profile,
        split, channel, scenario.server, scenario.planner,
    )
    plan = Plan(
        cut_layer=result.cut_layer,
        keep_rate=result.rho,
        levels=result.levels,
        bandwidth_hz=bw.allocation,
        objective_seconds=bw.objective_seconds,
        feasible=True,
    )
    _write_json(out / "plan.json", plan.to_dict())
    rows = _trace_rows(result)
    if rows:
        _write_csv(out / "plan_trace.csv", list(rows[0].keys()), rows)
    print(
        f"plan: cut_layer={plan.cut_layer} keep_rate={plan.keep_rate} "
        f"levels={plan.levels} nominal_round_delay={plan.objective_seconds:.4f}s "
        f"(config search: {result.iterations} iterations, converged={result.converged})"
    )

    if args.oracle:
        oracle = brute_force_config(context, scenario.planner)
        if oracle is None:
            print("oracle: brute force found no feasible configuration", file=sys.stderr)
            return 1
        gap = abs(result.objective_seconds - oracle["objective_seconds"]) / oracle["objective_seconds"]
        print(
            f"oracle: objective {oracle['objective_seconds']:.6f}s at "
            f"(l={oracle['cut_layer']}, rho={oracle['rho']}, E={oracle['levels']}); "
            f"relative gap {gap:.3%}"
        )
        if gap > 0.02:
            print("oracle: plan deviates from brute force by more than 2%", file=sys.stderr)
            return 1
    return 0


def cmd_simulate(args) -> int:
    scenario = _load_scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    plan = None
    if args.plan:
        plan = Plan.from_dict(json.loads(Path(args.plan).read_text()))
    report = run_session(scenario, plan=plan)

    _write_json(out / "session_report.json", report.to_dict())
    round_rows = []
    for log in report.rounds:
        for entry in log.entries:
            row = {
                "round": log.round_index,
                "device_id": entry["device_id"],
                **{k: entry["delay"][k] for k in ("td", "cc", "it", "sc", "gt", "du", "lt", "total")},
                "beta_up": entry["beta_up"],
                "beta_down": entry["beta_down"],
                "bytes_up_blobs": entry["bytes_up_blobs"],
                "bytes_up_adapter": entry["bytes_up_adapter"],
                "bytes_down_blobs": entry["bytes_down_blobs"],
                "broadcast_bytes": log.broadcast_bytes,
                "round_delay_seconds": log.delay_seconds,
                "checksum": log.checksum,
            }
            round_rows.append(row)
    if round_rows:
        _write_csv(out / "rounds.csv", list(round_rows[0].keys()), round_rows)
    if report.device_adapter is not None:
        save_adapter_checkpoint(report.device_adapter, out / "device_adapter.bin")
    if report.server_adapter is not None:
        save_adapter_checkpoint(report.server_adapter, out / "server_adapter.bin")
    print(
        f"simulated {report.num_rounds} rounds x {report.num_devices} devices: "
        f"total_delay={report.total_delay_seconds:.3f}s "
        f"uplink={report.uplink_bytes} B downlink={report.downlink_bytes} B"
    )
    return 0


def cmd_calibrate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.measurements:
        observations = load_accuracy_csv(args.measurements)
    else:
        from sftsim.simulator import _packaged_accuracy_observations

        observations = _packaged_accuracy_observations()
    surface = fit_accuracy_surface(observations)

    if args.scenario:
        scenario = _load_scenario(args)
        bounds = scenario.compression
        settings = scenario.planner
        steps = int(round((bounds.rho_max - bounds.rho_min) / settings.rho_grid_step))
        rho_grid = np.round(bounds.rho_min + settings.rho_grid_step * np.arange(steps + 1), 10)
        rho_grid = rho_grid[rho_grid <= bounds.rho_max + 1e-12]
        level_grid = [e for e in settings.level_grid if bounds.levels_min <= e <= bounds.levels_max]
        seed = scenario.seed
        bytes_per_param = scenario.profile.bytes_per_param
    else:
        rho_grid = np.round(0.05 + 0.05 * np.arange(20), 10)
        level_grid = [2, 4, 8, 16, 32]
        seed = args.seed if args.seed is not None else 0
        bytes_per_param = 4
    samples = measure_rate_grid(rho_grid, level_grid, seed=seed, bytes_per_param=bytes_per_param)
    predictor = calibrate_predictor(samples)

    _write_json(out / "accuracy_surface.json", surface.to_dict())
    _write_json(out / "rate_predictor.json", predictor.to_dict())
    print(f"calibrated: surface fit_mse={surface.fit_mse:.6g}, "
          f"predictor grid {len(rho_grid)}x{len(level_grid)}")
    return 0


def cmd_report(args) -> int:
    scenario = _load_scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reports = []
    for path in args.session:
        payload = json.loads(Path(path).read_text())
        reports.append(payload)

    first = reports[0]
    plan = Plan.from_dict(first["plan"])

    mem_rows = memory_comparison_rows(scenario, plan)
    _write_csv(out / "memory_comparison.csv", list(mem_rows[0].keys()), mem_rows)

    betas = [
        entry["beta_up"]
        for payload in reports
        for rnd in payload["rounds"]
        for entry in rnd["devices"]
    ]
    beta = float(np.mean(betas)) if betas else 1.0
    sweep_rows = bandwidth_sweep_rows(scenario, plan, beta)
    _write_csv(out / "delay_vs_bandwidth.csv", list(sweep_rows[0].keys()), sweep_rows)

    overhead = []
    for path, payload in zip(args.session, reports):
        rebuilt = _report_stub(payload)
        for row in overhead_rows(rebuilt):
            overhead.append({"session": str(path), **row})
    _write_csv(out / "overhead_per_scheme.csv", list(overhead[0].keys()), overhead)

    ratio = mem_rows[0]["ratio_vs_split"]
    print(f"memory ratio (full model vs split): {ratio:.2f}x")
    best = max(sweep_rows, key=lambda r: r["reduction_vs_uniform_pct"])
    print(
        f"best delay reduction vs uniform allocation: "
        f"{best['reduction_vs_uniform_pct']:.1f}% at {best['bandwidth_hz']/1e6:.1f} MHz"
    )
    return 0


def _report_stub(payload: dict):
    """Rebuild the byte totals needed by overhead_rows from a report dict."""
    from sftsim.simulator import SessionReport

    return SessionReport(
        seed=payload["seed"],
        plan=Plan.from_dict(payload["plan"]),
        num_rounds=payload["num_rounds"],
        num_devices=payload["num_devices"],
        total_delay_seconds=payload["total_delay_seconds"],
        uplink_bytes=payload["uplink_bytes"],
        downlink_bytes=payload["downlink_bytes"],
        uplink_activation_bytes=payload["uplink_activation_bytes"],
        downlink_gradient_bytes=payload["downlink_gradient_bytes"],
        uncompressed_activation_bytes=payload["uncompressed_activation_bytes"],
        loss_trace=tuple(payload["loss_trace"]),
        rounds=(),
        final_checksum=payload["final_checksum"],
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sftsim",
        description="Planner and round-level simulator for split fine-tuning over wireless networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required, help="scenario JSON path")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default=".", help="output directory")

    p_plan = sub.add_parser("plan", help="run the two-timescale optimization")
    add_common(p_plan)
    p_plan.add_argument("--oracle", action="store_true", help="cross-check against brute force")
    p_plan.set_defaults(func=cmd_plan)

    p_sim = sub.add_parser("simulate", help="run a full session round by round")
    add_common(p_sim)
    p_sim.add_argument("--plan", default=None, help="plan JSON (plans first when omitted)")
    p_sim.add_argument("--rounds", type=int, default=None, help="override round count")
    p_sim.add_argument("--devices", type=int, default=None, help="use only the first N devices")
    p_sim.set_defaults(func=cmd_simulate)

    p_cal = sub.add_parser("calibrate", help="fit the rate predictor and accuracy surface")
    add_common(p_cal, scenario_required=False)
    p_cal.add_argument("--measurements", default=None, help="accuracy CSV (rho,E,accuracy)")
    p_cal.set_defaults(func=cmd_calibrate)

    p_rep = sub.add_parser("report", help="emit comparison tables from session reports")
    add_common(p_rep)
    p_rep.add_argument("--session", nargs="+", required=True, help="session report JSON path(s)")
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
