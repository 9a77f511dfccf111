"""Experiment runner: simulate, run a method, score it, write CSV."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import BaselineConfig, ar_predict, kf_process_covariance, kf_step, ls_estimate
from .mapbuilder import ObservationSequence, coarse_positions
from .metrics import capacity, efficiency_ratio
from .radiomap import RadioMap, build_perfect_map, load_map
from .scenario import Scenario, Trajectory, load_config, observe
from .sensing import random_semi_unitary
from .tracker import MapModel, SwitchingKalmanTracker

logger = logging.getLogger(__name__)

CSV_VERSION = "# rmcsi-metrics v1"
STEP_FIELDS = [
    "method",
    "snr_db",
    "seed",
    "t",
    "bs",
    "los",
    "true_cell",
    "est_cell",
    "loc_error_m",
    "capacity",
    "efficiency",
]
SUMMARY_FIELDS = [
    "method",
    "snr_db",
    "seed",
    "n_rows",
    "mean_efficiency",
    "mean_efficiency_los",
    "mean_efficiency_nlos",
    "mean_capacity",
    "mean_loc_error_m",
]
METHODS = ("proposed", "proposed-random", "kf", "ls", "ar")


@dataclass
class MetricsRow:
    method: str
    snr_db: float
    seed: int
    t: int
    bs: int
    los: bool
    true_cell: int
    est_cell: int
    loc_error_m: float
    capacity: float
    efficiency: float


@dataclass
class RunConfig:
    scenario: dict
    methods: list[str] = field(default_factory=lambda: ["proposed", "kf"])
    snr_db: list[float] = field(default_factory=lambda: [20.0])
    seeds: list[int] = field(default_factory=lambda: [0])
    n_pilots: int = 1
    steps: int = 350
    maps: str | list[str] = "perfect"
    map_samples: int = 0  # 0 stores the exact covariances
    known_start: bool = True
    output: str | None = None
    route: list[list[int]] | None = None  # waypoints (row, col) instead of random walks
    route_dwell: int = 10

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if not self.snr_db:
            raise ValueError("SNR list must be nonempty")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        cfg = load_config(path)
        scen = cfg.pop("scenario", None)
        if scen is None:
            raise ValueError(f"{path}: missing 'scenario' entry")
        if isinstance(scen, str):
            scen_path = (path.parent / scen).resolve()
            if not scen_path.exists():
                raise FileNotFoundError(f"{path}: scenario file {scen_path} does not exist")
            scen = load_config(scen_path)
        maps = cfg.get("maps", "perfect")
        if maps != "perfect":
            maps = [str((path.parent / m).resolve()) for m in maps]
            for m in maps:
                if not Path(m).exists():
                    raise FileNotFoundError(f"{path}: map file {m} does not exist")
            cfg["maps"] = maps
        return cls(scenario=scen, **cfg)


# ---------------------------------------------------------------------------
# Routes and observation data
# ---------------------------------------------------------------------------


def route_cells(scenario: Scenario, waypoints: Sequence[Sequence[int]], dwell: int) -> np.ndarray:
    """Deterministic walk visiting (row, col) waypoints one grid step at a time,
    spending ``dwell`` slots in every cell."""
    grid = scenario.grid
    r, c = waypoints[0]
    cells = [grid.index(r, c)]
    for r1, c1 in waypoints[1:]:
        while (r, c) != (r1, c1):
            r += int(np.sign(r1 - r))
            c += int(np.sign(c1 - c))
            cells.append(grid.index(r, c))
    out = np.repeat(np.asarray(cells), dwell)
    trans = scenario.transitions
    for a, b in zip(out[:-1], out[1:]):
        if trans.probability(a, b) == 0:
            raise ValueError(f"route step {a} -> {b} is not reachable under the mobility model")
    return out


def simulate_observations(
    scenario: Scenario,
    cells: np.ndarray,
    n_passes: int,
    n_pilots: int,
    coarse_noise_std: float,
    rng: np.random.Generator,
    snr_db: float | None = None,
) -> list[ObservationSequence]:
    """Independent channel, sensing and coarse-position draws for repeated passes over ``cells``."""
    N = scenario.n_antennas
    sig = np.array([scenario.noise_variance(q, snr_db) for q in range(scenario.n_bs)])
    out = []
    for _ in range(n_passes):
        tr = scenario.trajectory_from_cells(cells, rng)
        T = len(cells)
        A = np.empty((T, scenario.n_bs, n_pilots, N), dtype=complex)
        y = np.empty((T, scenario.n_bs, n_pilots), dtype=complex)
        for t in range(T):
            for q in range(scenario.n_bs):
                A[t, q] = random_semi_unitary(n_pilots, N, rng)
                y[t, q] = observe(tr.channels[t, q], A[t, q], sig[q], rng)
        coarse = coarse_positions(scenario.grid, cells, coarse_noise_std, rng)
        out.append(ObservationSequence(y, A, sig, coarse, np.asarray(cells)))
    return out


def save_observations(sequences: Sequence[ObservationSequence], directory) -> None:
    """observations.csv (pass, t, bs, m, y_re, y_im), coarse.csv (pass, t, x, y),
    sensing.npz (A with shape (passes, T, n_bs, M, N), noise_variance)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass", "t", "bs", "m", "y_re", "y_im"])
        for p, s in enumerate(sequences):
            T, Q, M = s.y.shape
            for t in range(T):
                for q in range(Q):
                    for m in range(M):
                        v = s.y[t, q, m]
                        w.writerow([p, t, q, m, repr(float(v.real)), repr(float(v.imag))])
    with open(d / "coarse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass", "t", "x", "y"])
        for p, s in enumerate(sequences):
            for t, (x, yv) in enumerate(s.coarse):
                w.writerow([p, t, repr(float(x)), repr(float(yv))])
    np.savez(
        d / "sensing.npz",
        A=np.stack([s.A for s in sequences]),
        noise_variance=sequences[0].noise_variance,
    )


def load_observations(directory, true_cells: np.ndarray | None = None) -> list[ObservationSequence]:
    d = Path(directory)
    with np.load(d / "sensing.npz") as z:
        A, sig = z["A"], z["noise_variance"]
    P, T, Q, M, _ = A.shape
    obs = np.genfromtxt(d / "observations.csv", delimiter=",", names=True)
    obs = np.atleast_1d(obs)
    if obs.size != P * T * Q * M:
        raise ValueError(f"{d}: observation count {obs.size} does not match sensing shape {A.shape}")
    y = np.zeros((P, T, Q, M), dtype=complex)
    idx = (obs["pass"].astype(int), obs["t"].astype(int), obs["bs"].astype(int), obs["m"].astype(int))
    y[idx] = obs["y_re"] + 1j * obs["y_im"]
    coarse = np.zeros((P, T, 2))
    if (d / "coarse.csv").exists():
        cz = np.atleast_1d(np.genfromtxt(d / "coarse.csv", delimiter=",", names=True))
        coarse[cz["pass"].astype(int), cz["t"].astype(int)] = np.column_stack([cz["x"], cz["y"]])
    return [ObservationSequence(y[p], A[p], sig, coarse[p], true_cells) for p in range(P)]


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------


def _noise_stream(seed: int, method: str, snr_db: float) -> np.random.Generator:
    key = METHODS.index(method) if method in METHODS else len(METHODS)
    return np.random.default_rng([int(seed), key, int(round(snr_db * 1000)) & 0xFFFFFFFF])


def perfect_maps(scenario: Scenario, samples: int = 0, seed: int = 0) -> list[RadioMap]:
    if samples <= 0:
        return [build_perfect_map(scenario, 1, bs=q, exact=True) for q in range(scenario.n_bs)]
    rng = np.random.default_rng(seed)
    return [build_perfect_map(scenario, samples, rng, bs=q) for q in range(scenario.n_bs)]


def run_tracker(
    scenario: Scenario,
    maps: Sequence[RadioMap | MapModel],
    traj: Trajectory,
    snr_db: float,
    n_pilots: int,
    sensing: str,
    rng: np.random.Generator,
    known_start: bool = True,
):
    """Proposed tracker on one trajectory. Returns (estimates (T, n_bs, N), cells (T,), steps)."""
    sig = [scenario.noise_variance(q, snr_db) for q in range(scenario.n_bs)]
    tracker = SwitchingKalmanTracker(
        maps, scenario.transitions, scenario.gamma, sig, n_pilots, sensing, rng=rng
    )

    def sensors(t):
        return [lambda A, t=t, q=q: observe(traj.channels[t, q], A, sig[q], rng) for q in range(scenario.n_bs)]

    start = int(traj.cells[0]) if known_start else None
    steps = tracker.run(sensors, len(traj), initial_cell=start)
    H = np.stack([s.state.h_hat for s in steps])
    cells = np.array([s.state.p_hat for s in steps])
    return H, cells, steps


def run_baseline(
    kind: str,
    scenario: Scenario,
    traj: Trajectory,
    snr_db: float,
    rng: np.random.Generator,
    config: BaselineConfig | None = None,
) -> np.ndarray:
    """Channel estimates (T, n_bs, N) of a map-free baseline."""
    cfg = config or BaselineConfig(kind)
    N, T, g = scenario.n_antennas, len(traj), scenario.gamma
    M = cfg.pilots(N)
    H = np.zeros((T, scenario.n_bs, N), dtype=complex)
    for q in range(scenario.n_bs):
        sig = scenario.noise_variance(q, snr_db)
        h_true = traj.channels[:, q]
        if kind == "kf":
            Qp = kf_process_covariance(scenario.covariances(q), g)
            # stationary prior: process level divided by (1 - gamma^2)
            Q = Qp / (1.0 - g**2) if g < 1 else Qp.copy()
            h = np.zeros(N, dtype=complex)
            for t in range(T):
                A = random_semi_unitary(M, N, rng)
                h, Q = kf_step(h, Q, observe(h_true[t], A, sig, rng), A, sig, g, Qp)
                H[t, q] = h
        elif kind == "ls":
            for t in range(T):
                A = random_semi_unitary(M, N, rng)
                H[t, q] = ls_estimate(observe(h_true[t], A, sig, rng), A)
        elif kind == "ar":
            warm = min(cfg.history, T)
            for t in range(warm):
                A = random_semi_unitary(N, N, rng)
                H[t, q] = ls_estimate(observe(h_true[t], A, sig, rng), A)
            for t in range(warm, T):
                H[t, q] = ar_predict(H[t - cfg.history : t, q], cfg.ar_order)
        else:
            raise ValueError(f"unknown baseline {kind!r}")
    return H


def score(
    method: str,
    snr_db: float,
    seed: int,
    scenario: Scenario,
    traj: Trajectory,
    H_est: np.ndarray,
    est_cells: np.ndarray | None,
) -> list[MetricsRow]:
    rows = []
    centers = scenario.grid.centers
    for q in range(scenario.n_bs):
        sig = scenario.noise_variance(q, snr_db)
        los = scenario.base_stations[q].layout.los
        for t in range(len(traj)):
            c = int(traj.cells[t])
            e = -1 if est_cells is None else int(est_cells[t])
            err = float("nan") if e < 0 else float(np.linalg.norm(centers[c] - centers[e]))
            h, hh = traj.channels[t, q], H_est[t, q]
            rows.append(
                MetricsRow(
                    method,
                    snr_db,
                    seed,
                    t,
                    q,
                    bool(los[c]),
                    c,
                    e,
                    err,
                    capacity(h, hh, sig),
                    efficiency_ratio(h, hh, sig),
                )
            )
    return rows


def run_single(
    method: str,
    scenario: Scenario,
    maps: Sequence[RadioMap | MapModel] | None,
    traj: Trajectory,
    snr_db: float,
    seed: int,
    n_pilots: int = 1,
    known_start: bool = True,
    on_steps: Callable | None = None,
) -> list[MetricsRow]:
    """Score one method on one trajectory. ``on_steps(method, snr_db, seed, steps)``
    receives the tracker's per-step records for the proposed methods."""
    rng = _noise_stream(seed, method, snr_db)
    if method in ("proposed", "proposed-random"):
        sensing = "adaptive" if method == "proposed" else "random"
        H, cells, steps = run_tracker(scenario, maps, traj, snr_db, n_pilots, sensing, rng, known_start)
        if on_steps is not None:
            on_steps(method, snr_db, seed, steps)
        return score(method, snr_db, seed, scenario, traj, H, cells)
    H = run_baseline(method, scenario, traj, snr_db, rng)
    return score(method, snr_db, seed, scenario, traj, H, None)


def summarize(rows: Sequence[MetricsRow], by_seed: bool = True) -> list[dict]:
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        key = (r.method, r.snr_db, r.seed if by_seed else -1)
        groups.setdefault(key, []).append(r)
    out = []
    for (method, snr, seed), rs in groups.items():
        eff = np.array([r.efficiency for r in rs])
        los = np.array([r.los for r in rs])
        loc = np.array([r.loc_error_m for r in rs])
        out.append(
            {
                "method": method,
                "snr_db": snr,
                "seed": seed,
                "n_rows": len(rs),
                "mean_efficiency": float(eff.mean()),
                "mean_efficiency_los": float(eff[los].mean()) if los.any() else float("nan"),
                "mean_efficiency_nlos": float(eff[~los].mean()) if (~los).any() else float("nan"),
                "mean_capacity": float(np.mean([r.capacity for r in rs])),
                "mean_loc_error_m": float(np.nanmean(loc)) if np.isfinite(loc).any() else float("nan"),
            }
        )
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def write_csv(path_or_buf, fieldnames: Iterable[str], rows: Iterable[dict]) -> None:
    own = not isinstance(path_or_buf, io.TextIOBase)
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        fieldnames = list(fieldnames)
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fieldnames])
    finally:
        if own:
            fh.close()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.strip() != CSV_VERSION:
            raise ValueError(f"{path}: missing or unsupported version line {first.strip()!r}")
        return list(csv.DictReader(fh))


def run_experiment(config: RunConfig, on_steps: Callable | None = None) -> dict[str, list]:
    """Every (method, SNR, seed) combination; writes steps.csv, runs.csv and
    summary.csv under ``config.output`` when set. Deterministic given seeds.
    ``on_steps`` is passed through to :func:`run_single`."""
    scenario = Scenario.from_config(config.scenario)
    if "proposed" in config.methods or "proposed-random" in config.methods:
        if config.maps == "perfect":
            maps = perfect_maps(scenario, config.map_samples)
        else:
            maps = [load_map(p) for p in config.maps]
            if len(maps) != scenario.n_bs:
                raise ValueError(f"{len(maps)} map files for {scenario.n_bs} base stations")
        models = [MapModel(m) for m in maps]
    else:
        models = None
    rows: list[MetricsRow] = []
    for seed in config.seeds:
        if config.route:
            rng = np.random.default_rng(seed)
            cells = route_cells(scenario, config.route, config.route_dwell)
            traj = scenario.trajectory_from_cells(cells, rng)
        else:
            traj = scenario.simulate(config.steps, seed=seed)
        for snr in config.snr_db:
            for method in config.methods:
                logger.info("seed %d snr %g method %s", seed, snr, method)
                rows.extend(
                    run_single(
                        method, scenario, models, traj, snr, seed, config.n_pilots, config.known_start, on_steps
                    )
                )
    runs = summarize(rows, by_seed=True)
    summary = summarize(rows, by_seed=False)
    if config.output:
        out = Path(config.output)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "steps.csv", STEP_FIELDS, (r.__dict__ for r in rows))
        write_csv(out / "runs.csv", SUMMARY_FIELDS, runs)
        write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    return {"rows": rows, "runs": runs, "summary": summary}
