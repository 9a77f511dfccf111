"""Command-line entry point: simulate, track, build-map, eval, map."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from ._linalg import NumericalFallbackWarning
from .baselines import BaselineConfig
from .harness import (
    STEP_FIELDS,
    RunConfig,
    load_observations,
    perfect_maps,
    run_baseline,
    run_experiment,
    run_tracker,
    save_observations,
    score,
    simulate_observations,
    write_csv,
)
from .mapbuilder import BuilderConfig, build_map, coarse_positions
from .radiomap import build_perfect_map, load_map, save_map, summarize_map
from .scenario import Scenario, load_config, read_trajectory_csv

EXIT_FALLBACK = 3


def _scenario(args) -> Scenario:
    scenario = Scenario.from_config(load_config(args.config))
    changes = {}
    if getattr(args, "gamma", None) is not None:
        changes["gamma"] = args.gamma
    if getattr(args, "snr_db", None) is not None:
        changes["snr_db"] = args.snr_db
    if getattr(args, "bs_list", None):
        changes["base_stations"] = tuple(scenario.base_stations[q] for q in args.bs_list)
    return scenario.with_overrides(**changes) if changes else scenario


def _bs_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated indices, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty base-station list")
    return out


def _open_out(path):
    return open(path, "w", newline="") if path and path != "-" else sys.stdout


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    scenario = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = scenario.simulate(args.steps, seed=args.seed)
    traj.to_csv(out / "trajectory.csv", scenario.grid)
    if args.passes > 0:
        rng = np.random.default_rng([args.seed, 1])
        seqs = simulate_observations(scenario, traj.cells, args.passes, args.pilots, args.coarse_noise_std, rng)
        save_observations(seqs, out)


def cmd_track(args) -> None:
    scenario = _scenario(args)
    if args.trajectory:
        _, cells = read_trajectory_csv(args.trajectory)
        traj = scenario.trajectory_from_cells(cells, np.random.default_rng(args.seed))
    else:
        traj = scenario.simulate(args.steps, seed=args.seed)
    snr = scenario.snr_db
    rng = np.random.default_rng([args.seed, 2])
    if args.baseline:
        cfg = BaselineConfig(args.baseline, n_pilots=args.pilots)
        H = run_baseline(args.baseline, scenario, traj, snr, rng, cfg)
        method, cells = args.baseline, None
    else:
        if args.map:
            maps = [load_map(p) for p in args.map]
            if len(maps) != scenario.n_bs:
                raise SystemExit(f"error: {len(maps)} map files for {scenario.n_bs} base stations")
        else:
            maps = perfect_maps(scenario)
        sensing = "adaptive" if args.adaptive_sensing == "on" else "random"
        H, cells, _ = run_tracker(scenario, maps, traj, snr, args.pilots or 1, sensing, rng, not args.unknown_start)
        method = "proposed" if sensing == "adaptive" else "proposed-random"
    rows = score(method, snr, args.seed, scenario, traj, H, cells)
    fh = _open_out(args.out)
    try:
        write_csv(fh, STEP_FIELDS, (r.__dict__ for r in rows))
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_build_map(args) -> None:
    scenario = _scenario(args)
    truth = None
    if args.trajectory:
        _, truth = read_trajectory_csv(args.trajectory)
    seqs = load_observations(args.observations, truth)
    if args.coarse_noise_std is not None:
        if truth is None:
            raise SystemExit("error: --coarse-noise-std needs --trajectory to perturb")
        rng = np.random.default_rng(args.seed)
        for s in seqs:
            s.coarse = coarse_positions(scenario.grid, truth, args.coarse_noise_std, rng)
    if seqs[0].n_bs != scenario.n_bs:
        raise SystemExit(f"error: observations cover {seqs[0].n_bs} base stations, scenario has {scenario.n_bs}")
    cfg = BuilderConfig(mu=args.mu, epsilon=args.epsilon, max_iters=args.max_iters)
    result = build_map(seqs, scenario.transitions, scenario.gamma, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for q, m in enumerate(result.maps):
        save_map(m, out / f"map_bs{q}.rmap", args.precision)
    rows = [
        {
            "iter": r.iteration,
            "mean_position_change_m": r.mean_change,
            "objective": r.objective,
            "loc_error_m": r.localization_error,
        }
        for r in result.history
    ]
    write_csv(out / "iterations.csv", ["iter", "mean_position_change_m", "objective", "loc_error_m"], rows)
    with open(out / "paths.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pass", "t", "cell"])
        for p, path in enumerate(result.paths):
            w.writerows([p, t, int(c)] for t, c in enumerate(path))
    if not result.converged:
        print(f"warning: no convergence after {cfg.max_iters} iterations; best iterate written", file=sys.stderr)


def cmd_eval(args) -> None:
    cfg = RunConfig.from_file(args.run_config)
    if args.output:
        cfg.output = args.output
    elif cfg.output:
        cfg.output = str((Path(args.run_config).parent / cfg.output).resolve())
    res = run_experiment(cfg)
    if not cfg.output:
        from .harness import SUMMARY_FIELDS

        write_csv(sys.stdout, SUMMARY_FIELDS, res["summary"])


def cmd_map_inspect(args) -> None:
    rows = summarize_map(load_map(args.map))
    fields = list(rows[0]) if rows else ["cell"]
    w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_map_build(args) -> None:
    scenario = _scenario(args)
    if args.samples > 0:
        m = build_perfect_map(scenario, args.samples, np.random.default_rng(args.seed), bs=args.bs)
    else:
        m = build_perfect_map(scenario, 1, bs=args.bs, exact=True)
    save_map(m, args.out, args.precision)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmcsi", description="Radio-map-embedded CSI tracking toolkit")
    p.add_argument("--strict", action="store_true", help="exit nonzero if any numerical fallback was flagged")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="sample a trajectory and compressed observations")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, default=350)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--passes", type=int, default=1, help="observation passes over the trajectory (0: none)")
    s.add_argument("--pilots", type=int, default=1)
    s.add_argument("--snr-db", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--coarse-noise-std", type=float, default=30.0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("track", help="run the tracker or a baseline and print per-step CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--map", nargs="+", help="map file per base station (default: exact perfect maps)")
    t.add_argument("--snr-db", type=float)
    t.add_argument("--pilots", type=int)
    t.add_argument("--adaptive-sensing", choices=["on", "off"], default="on")
    t.add_argument("--gamma", type=float)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--bs-list", type=_bs_list, help="comma-separated base-station indices")
    t.add_argument("--baseline", choices=["kf", "ls", "ar"])
    t.add_argument("--steps", type=int, default=350)
    t.add_argument("--trajectory", help="trajectory CSV to follow instead of a random walk")
    t.add_argument("--unknown-start", action="store_true", help="start from the uniform prior instead of the true cell")
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_track)

    b = sub.add_parser("build-map", help="blind map construction from observations")
    b.add_argument("--config", required=True)
    b.add_argument("--observations", required=True, help="directory written by 'simulate'")
    b.add_argument("--trajectory", help="ground-truth trajectory CSV for error reporting")
    b.add_argument("--mu", type=float, default=0.05)
    b.add_argument("--epsilon", type=float, default=0.5)
    b.add_argument("--max-iters", type=int, default=10)
    b.add_argument("--coarse-noise-std", type=float, help="redraw coarse positions from the trajectory")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--gamma", type=float)
    b.add_argument("--precision", choices=["single", "double"], default="single")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_build_map)

    e = sub.add_parser("eval", help="run an experiment described by a run config")
    e.add_argument("run_config")
    e.add_argument("--output", help="override the output directory")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("map", help="map file utilities")
    msub = m.add_subparsers(dest="map_command", required=True)
    mi = msub.add_parser("inspect", help="per-cell summary CSV")
    mi.add_argument("map")
    mi.set_defaults(func=cmd_map_inspect)
    mb = msub.add_parser("build", help="perfect map from the scenario's ground truth")
    mb.add_argument("--config", required=True)
    mb.add_argument("--bs", type=int, default=0)
    mb.add_argument("--samples", type=int, default=0, help="channel draws per cell (0: exact covariance)")
    mb.add_argument("--seed", type=int, default=0)
    mb.add_argument("--precision", choices=["single", "double"], default="single")
    mb.add_argument("--out", required=True)
    mb.set_defaults(func=cmd_map_build)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NumericalFallbackWarning)
        try:
            args.func(args)
        except BrokenPipeError:
            # reader closed early (e.g. piped into head)
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
            return 0
        except (ValueError, FileNotFoundError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    flagged = [w for w in caught if issubclass(w.category, NumericalFallbackWarning)]
    for w in caught:
        print(f"{w.category.__name__}: {w.message}", file=sys.stderr)
    if args.strict and flagged:
        print(f"error: {len(flagged)} numerical fallback(s) flagged under --strict", file=sys.stderr)
        return EXIT_FALLBACK
    return 0


if __name__ == "__main__":
    sys.exit(main())
