"""Command-line entry point: ``bimslam {simulate,run,evaluate,sweep}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .evaluation import (
    EmptyIntersectionError,
    TrajectoryPair,
    aggregate_improvement,
    compute_ate,
    compute_map_rmse,
    drift_series,
    improvement_percent,
    sample_wall,
)
from .session import Scenario, build_world, run_session
from .simulator import generate_trajectory, simulate_sequence


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bimslam", description="BIM-constrained planar SLAM back-end: simulation and evaluation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def scenario_args(sp):
        sp.add_argument("--scenario", help="scenario JSON (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--mode", choices=("bim", "baseline"), help="override the scenario mode")

    s = sub.add_parser("simulate", help="write a ground-truth trajectory and the observation sequence")
    scenario_args(s)
    s.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("run", help="run a session and write trajectories, metrics and the session log")
    scenario_args(r)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--record-timing", action="store_true", help="fill the wallclock_s column")
    r.add_argument("--dump-graph", action="store_true", help="also write graph.txt")

    e = sub.add_parser("evaluate", help="score an estimated trajectory against ground truth")
    e.add_argument("--est", required=True, help="estimated trajectory file")
    e.add_argument("--gt", required=True, help="ground-truth trajectory file")
    e.add_argument("--bim", help="BIM walls JSON, expressed in the trajectory frame")
    e.add_argument("--map-walls", help="reconstructed walls JSON, for map RMSE")
    e.add_argument("--baseline-est", help="baseline estimate, for the improvement column")
    e.add_argument("--drift-out", help="also write the per-frame drift series CSV")
    e.add_argument("--out", required=True, help="output CSV")

    w = sub.add_parser("sweep", help="run a grid of sessions and write one metrics row per cell")
    scenario_args(w)
    w.add_argument("--missing-fraction", type=_float_list, help="comma-separated phantom-wall fractions")
    w.add_argument("--seeds", type=_positive_int, default=1, help="number of consecutive seeds")
    w.add_argument("--modes", help="comma-separated modes, e.g. bim,baseline")
    w.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    w.add_argument("--record-timing", action="store_true", help="fill the wallclock_s column")
    w.add_argument("--summary", help="also write per-(fraction) paired summary CSV")
    w.add_argument("--out", required=True, help="output CSV")
    return p


def _scenario(args) -> Scenario:
    sc = io.load_scenario(args.scenario) if args.scenario else Scenario()
    if args.seed is not None:
        sc = sc.with_(seed=args.seed)
    if args.mode is not None:
        sc = sc.with_(mode=args.mode)
    return sc


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = io.ensure_dir(args.out)
    world = build_world(sc)
    gt = generate_trajectory(world, sc.trajectory.kind, sc.trajectory.n_frames, sc.seed)
    obs = simulate_sequence(world, gt, sc.sensor, sc.noise, sc.seed)
    io.save_trajectory(gt, out / "gt_traj.txt")
    io.save_observations(obs, out / "observations.jsonl")
    io.save_bim_walls(world.bim_walls, out / "bim_walls.json")
    io.save_bim_walls(world.bim_walls_map(), out / "bim_map.json")
    return 0


def _write_session(res, out: Path, suffix: str, dump_graph: bool) -> None:
    io.save_trajectory(res.estimated, out / f"est_traj{suffix}.txt")
    io.save_trajectory(res.ground_truth, out / f"gt_traj{suffix}.txt")
    io.write_lines(res.log, out / f"session{suffix}.log")
    io.write_drift_csv(res.drift, out / f"drift{suffix}.csv")
    io.save_bim_walls(res.state.track_walls(), out / f"map_walls{suffix}.json")
    io.save_bim_walls(res.world.bim_walls_map(), out / f"bim_map{suffix}.json")
    if dump_graph:
        (out / f"graph{suffix}.txt").write_text(res.state.graph.dump())


def cmd_run(args) -> int:
    sc = _scenario(args)
    out = io.ensure_dir(args.out)
    rows = []
    for k in range(sc.repeats):
        res = run_session(sc.with_(seed=sc.seed + k))
        rows.append(res.metrics_row())
        _write_session(res, out, "" if k == 0 else f"_r{k}", args.dump_graph)
        if res.state.errors:
            for frame, msg in res.state.errors:
                print(f"warning: optimisation failed at frame {frame}: {msg}", file=sys.stderr)
    io.write_metrics_csv(rows, out / "metrics.csv", record_timing=args.record_timing)
    return 0


def cmd_evaluate(args) -> int:
    est = io.load_trajectory(args.est)
    gt = io.load_trajectory(args.gt)
    fe, fg = {k for k, _ in est}, {k for k, _ in gt}
    if fe != fg:
        raise EmptyIntersectionError(
            f"frame intersection incomplete: {len(fe)} estimated vs {len(fg)} ground-truth frames, "
            f"{len(fe & fg)} in common"
        )
    pair = TrajectoryPair(est, gt)
    row = {"ate_raw": compute_ate(pair, False), "ate_aligned": compute_ate(pair, True)}
    drift = drift_series(pair)
    row["final_drift"] = drift[-1][1]
    row["max_drift"] = max(v for _, v in drift)
    row["map_rmse"] = float("nan")
    if args.map_walls:
        if not args.bim:
            raise UsageError("--map-walls requires --bim")
        walls = io.load_bim_walls(args.map_walls)
        samples = np.concatenate([sample_wall(w) for w in walls]) if walls else np.zeros((0, 3))
        row["map_rmse"] = compute_map_rmse(samples, io.load_bim_walls(args.bim))
    row["improvement_vs_baseline"] = None
    if args.baseline_est:
        base = TrajectoryPair(io.load_trajectory(args.baseline_est), gt)
        row["improvement_vs_baseline"] = improvement_percent(compute_ate(base, False), row["ate_raw"])
    cols = ("ate_raw", "ate_aligned", "map_rmse", "final_drift", "max_drift", "improvement_vs_baseline")
    io.write_metrics_csv([row], args.out, columns=cols)
    if args.drift_out:
        io.write_drift_csv(drift, args.drift_out)
    return 0


def _sweep_cell(cell):
    sc, record_timing = cell
    row = run_session(sc).metrics_row()
    if not record_timing:
        row["wallclock_s"] = None
    return row


def _sort_key(row):
    return (str(row["scenario"]), str(row["mode"]), float(row["missing_fraction"]), int(row["seed"]))


def cmd_sweep(args) -> int:
    base = _scenario(args)
    fractions = args.missing_fraction or [base.world.phantom_fraction]
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else [base.mode]
    for m in modes:
        if m not in ("bim", "baseline"):
            raise UsageError(f"unknown mode {m!r}")
    cells = [
        (base.with_(mode=m, seed=base.seed + k, world=replace(base.world, phantom_fraction=f)), args.record_timing)
        for f in fractions
        for m in modes
        for k in range(args.seeds)
    ]
    if args.jobs > 1:
        from multiprocessing import get_context

        with get_context("spawn").Pool(args.jobs) as pool:
            rows = pool.map(_sweep_cell, cells)
    else:
        rows = [_sweep_cell(c) for c in cells]
    rows.sort(key=_sort_key)
    io.write_metrics_csv(rows, args.out, record_timing=args.record_timing)
    if args.summary:
        io.write_metrics_csv(_summarise(rows, fractions), args.summary, columns=SUMMARY_COLUMNS)
    return 0


SUMMARY_COLUMNS = (
    "missing_fraction", "mode", "n", "median_ate_raw", "median_map_rmse",
    "ate_improvement_of_means", "ate_mean_of_improvements",
)


def _summarise(rows, fractions) -> list:
    out = []
    for f in sorted(fractions):
        by_mode = {}
        for r in rows:
            if float(r["missing_fraction"]) == f:
                by_mode.setdefault(r["mode"], {})[r["seed"]] = r
        for mode in sorted(by_mode):
            rs = [by_mode[mode][s] for s in sorted(by_mode[mode])]
            row = {
                "missing_fraction": f,
                "mode": mode,
                "n": len(rs),
                "median_ate_raw": float(np.median([r["ate_raw"] for r in rs])),
                "median_map_rmse": float(np.nanmedian([r["map_rmse"] for r in rs])),
            }
            if mode == "bim" and "baseline" in by_mode:
                seeds = sorted(set(by_mode["bim"]) & set(by_mode["baseline"]))
                agg = aggregate_improvement(
                    [by_mode["baseline"][s]["ate_raw"] for s in seeds],
                    [by_mode["bim"][s]["ate_raw"] for s in seeds],
                )
                row["ate_improvement_of_means"] = agg["percentage_of_means"]
                row["ate_mean_of_improvements"] = agg["mean_of_percentages"]
            out.append(row)
    return out


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
