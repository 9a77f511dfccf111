"""Synthetic world: grid, mobility chain, geometric multipath channels, observations.

Everything here is ground truth for the estimators in the rest of the package.
A :class:`Scenario` is immutable once built; randomness enters only through
explicit ``numpy.random.Generator`` arguments or seeds.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import yaml
from scipy.spatial import cKDTree
from shapely.geometry import LineString, box

from ._linalg import check_semi_unitary, complex_normal, hermitian, psd_sqrt

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Geometry and mobility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Regular grid of square cells.

    ``origin`` is the lower-left corner; cell ``(row, col)`` has index
    ``row * n_cols + col`` and center ``origin + ((col + .5), (row + .5)) * resolution``.
    """

    n_rows: int
    n_cols: int
    resolution: float = 5.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one row and one column")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @cached_property
    def centers(self) -> np.ndarray:
        rows, cols = np.divmod(np.arange(self.n_cells), self.n_cols)
        xy = np.stack([cols + 0.5, rows + 0.5], axis=1) * self.resolution
        xy += np.asarray(self.origin)
        xy.setflags(write=False)
        return xy

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise IndexError(f"cell ({row}, {col}) outside {self.n_rows}x{self.n_cols} grid")
        return row * self.n_cols + col

    def row_col(self, cell: int) -> tuple[int, int]:
        self.check(cell)
        return divmod(int(cell), self.n_cols)

    def center(self, cell: int) -> np.ndarray:
        self.check(cell)
        return self.centers[cell]

    def check(self, cell) -> None:
        c = np.asarray(cell)
        if np.any(c < 0) or np.any(c >= self.n_cells):
            raise IndexError(f"cell index out of range [0, {self.n_cells})")

    def nearest_cell(self, points: np.ndarray) -> np.ndarray:
        """Index of the grid cell whose center is closest to each point (clamped to the grid)."""
        p = (np.atleast_2d(points) - np.asarray(self.origin)) / self.resolution
        col = np.clip(np.floor(p[:, 0]), 0, self.n_cols - 1).astype(int)
        row = np.clip(np.floor(p[:, 1]), 0, self.n_rows - 1).astype(int)
        return row * self.n_cols + col


@dataclass(frozen=True)
class MobilityModel:
    """Truncated Gauss-Markov mobility prior on the grid.

    ``length_scale`` divides the squared distance in the exponent. The
    default of 1 m reproduces ``exp(-||x_i - (x_j + dt v)||^2)`` literally;
    larger values let a random walk leave its cell when cells are metres wide.
    """

    mean_velocity: tuple[float, float] = (0.0, 0.0)
    max_speed: float = 15.0
    slot_duration: float = 0.5
    length_scale: float = 1.0

    def __post_init__(self):
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")
        if self.slot_duration <= 0:
            raise ValueError("slot_duration must be positive")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        object.__setattr__(self, "mean_velocity", tuple(float(v) for v in self.mean_velocity))

    @property
    def reach(self) -> float:
        """Largest distance a user can cover in one slot."""
        return self.max_speed * self.slot_duration


class EmptySupportError(ValueError):
    """A transition row has no reachable cell with nonzero weight."""


class TransitionModel:
    """Sparse transition matrix ``P[j, i] = P(p_t = x_i | p_{t-1} = x_j)``.

    Rows are normalized; entries outside the truncation radius are
    structurally zero.
    """

    def __init__(self, grid: Grid, mobility: MobilityModel):
        self.grid = grid
        self.mobility = mobility
        centers = grid.centers
        tree = cKDTree(centers)
        # small slack so cells exactly at the reach radius are kept
        neighbours = tree.query_ball_point(centers, mobility.reach * (1 + 1e-12) + 1e-12)
        shift = mobility.slot_duration * np.asarray(mobility.mean_velocity)

        rows, cols, vals = [], [], []
        for j, nb in enumerate(neighbours):
            nb = np.sort(np.asarray(nb, dtype=int))
            if nb.size == 0:
                raise EmptySupportError(f"cell {j} has no reachable cell")
            d2 = np.sum((centers[nb] - (centers[j] + shift)) ** 2, axis=1)
            w = np.exp(-d2 / mobility.length_scale**2)
            total = w.sum()
            if not total > 0:
                raise EmptySupportError(
                    f"cell {j}: every reachable cell has zero weight; "
                    "mean velocity points outside the truncation radius"
                )
            keep = w > 0
            rows.append(np.full(keep.sum(), j))
            cols.append(nb[keep])
            vals.append(w[keep] / total)
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(grid.n_cells, grid.n_cells),
        )
        self.matrix.sort_indices()

    def support(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        """Reachable cells (ascending) and their probabilities from ``cell``."""
        self.grid.check(cell)
        lo, hi = self.matrix.indptr[cell], self.matrix.indptr[cell + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def probability(self, from_cell: int, to_cell: int) -> float:
        self.grid.check(from_cell)
        self.grid.check(to_cell)
        return float(self.matrix[from_cell, to_cell])

    def row(self, cell: int) -> np.ndarray:
        out = np.zeros(self.grid.n_cells)
        idx, p = self.support(cell)
        out[idx] = p
        return out

    def sample_next(self, cell: int, rng: np.random.Generator) -> int:
        idx, p = self.support(cell)
        return int(idx[min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), idx.size - 1)])

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(source, destination, log-probability) sorted by destination then source."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.row, coo.col))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64), np.log(coo.data[order])


def transition_probability(from_cell: int, to_cell: int, model: MobilityModel, grid: Grid) -> float:
    """Normalized truncated Gauss-Markov probability of moving ``from_cell -> to_cell``."""
    return TransitionModel(grid, model).probability(from_cell, to_cell)


def sample_trajectory(
    model: MobilityModel | TransitionModel,
    grid: Grid,
    length: int,
    rng_seed=None,
    initial_cell: int | None = None,
) -> np.ndarray:
    """Draw a cell sequence from the mobility chain, starting uniformly at random."""
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    trans = model if isinstance(model, TransitionModel) else TransitionModel(grid, model)
    rng = np.random.default_rng(rng_seed)
    cells = np.empty(length, dtype=int)
    cells[0] = rng.integers(grid.n_cells) if initial_cell is None else initial_cell
    grid.check(cells[0])
    for t in range(1, length):
        cells[t] = trans.sample_next(cells[t - 1], rng)
    return cells


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------


def steering_vector(theta: float, n_antennas: int) -> np.ndarray:
    """Half-wavelength ULA response, element k = exp(j pi k sin(theta))."""
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    k = np.arange(n_antennas)
    return np.exp(1j * np.pi * k * np.sin(theta))


@dataclass(frozen=True)
class ChannelParams:
    n_antennas: int = 16
    gamma: float = 0.3
    noise_variance: float = 1e-2

    def __post_init__(self):
        if self.n_antennas < 2:
            raise ValueError("n_antennas must be >= 2")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")


@dataclass(frozen=True)
class ScattererLayout:
    """Static paths per cell plus the moving-scatterer floor.

    ``path_powers[i]`` and ``path_angles[i]`` hold E|a_l|^2 and theta_l for
    the static paths of cell ``i``; ``moving_power`` is sigma_h^2.
    """

    path_powers: tuple[np.ndarray, ...]
    path_angles: tuple[np.ndarray, ...]
    los: np.ndarray
    moving_power: float

    def __post_init__(self):
        if len(self.path_powers) != len(self.path_angles) or len(self.path_powers) != len(self.los):
            raise ValueError("per-cell path lists must have one entry per cell")
        if self.moving_power < 0:
            raise ValueError("moving_power must be >= 0")
        for a in self.path_angles:
            if np.any(np.abs(a) > np.pi / 2 + 1e-12):
                raise ValueError("departure angles must lie in [-pi/2, pi/2]")
        static = np.mean([p.sum() for p in self.path_powers])
        # per-antenna static energy is sum of path powers for unit-modulus steering
        if self.moving_power > 0.1 * static + 1e-15:
            raise ValueError("moving-scatter power must be <= 0.1 x mean static energy per antenna")

    @property
    def n_cells(self) -> int:
        return len(self.los)


def true_covariance(cell: int, layout: ScattererLayout, params: ChannelParams | int) -> np.ndarray:
    """C(x) = sum_l E|a_l|^2 alpha(theta_l) alpha(theta_l)^H + sigma_h^2 I."""
    n = params if isinstance(params, (int, np.integer)) else params.n_antennas
    powers, angles = layout.path_powers[cell], layout.path_angles[cell]
    C = layout.moving_power * np.eye(n, dtype=complex)
    if len(angles):
        S = np.stack([steering_vector(a, n) for a in angles], axis=1)
        C = C + (S * powers) @ S.conj().T
    return hermitian(C)


def evolve_channel(
    h_prev: np.ndarray,
    cell: int,
    params: ChannelParams,
    layout: ScattererLayout | None,
    rng: np.random.Generator,
    *,
    sqrt_cov: np.ndarray | None = None,
) -> np.ndarray:
    """One AR(1) step h_t = gamma h_{t-1} + sqrt(1 - gamma^2) u_t, u_t ~ CN(0, C(cell)).

    ``sqrt_cov`` short-circuits the eigendecomposition when the caller caches it.
    """
    if not np.all(np.isfinite(h_prev)):
        raise ValueError("previous channel has non-finite entries")
    if sqrt_cov is None:
        sqrt_cov = psd_sqrt(true_covariance(cell, layout, params))
    u = sqrt_cov @ complex_normal(rng, params.n_antennas)
    g = params.gamma
    return g * h_prev + np.sqrt(1.0 - g * g) * u


def observe(h: np.ndarray, A: np.ndarray, noise_variance: float, rng: np.random.Generator) -> np.ndarray:
    """y = A h + n with n ~ CN(0, noise_variance I)."""
    A = np.atleast_2d(A)
    check_semi_unitary(A)
    if A.shape[0] > A.shape[1]:
        raise ValueError("sensing matrix cannot have more rows than antennas")
    return A @ h + np.sqrt(noise_variance) * complex_normal(rng, A.shape[0])


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseStation:
    position: tuple[float, float]
    boresight: float  # radians; array broadside direction
    layout: ScattererLayout


def _departure_angle(bs: np.ndarray, boresight: float, point: np.ndarray) -> float:
    d = point - bs
    ang = np.arctan2(d[1], d[0]) - boresight
    ang = (ang + np.pi) % (2 * np.pi) - np.pi
    return float(np.clip(ang, -np.pi / 2, np.pi / 2))


def generate_scatterers(grid: Grid, n: int, rng: np.random.Generator, margin: float = 0.1) -> np.ndarray:
    """Random reflector points (x, y, reflectivity) over the grid area plus a margin."""
    x0, y0 = grid.origin
    W, H = grid.n_cols * grid.resolution, grid.n_rows * grid.resolution
    xy = np.column_stack(
        [
            rng.uniform(x0 - margin * W, x0 + (1 + margin) * W, n),
            rng.uniform(y0 - margin * H, y0 + (1 + margin) * H, n),
        ]
    )
    return np.column_stack([xy, rng.uniform(0.2, 1.0, n)])


def generate_layout(
    grid: Grid,
    bs_position: Sequence[float],
    boresight: float,
    buildings: Sequence[Sequence[float]],
    scatterers: np.ndarray,
    rng: np.random.Generator,
    *,
    los_weak_paths: tuple[int, int] = (0, 2),
    weak_power: tuple[float, float] = (0.05, 0.2),
    nlos_paths: tuple[int, int] = (3, 6),
    nlos_power: float = 0.5,
    decay_length: float = 20.0,
    moving_ratio: float = 0.01,
) -> ScattererLayout:
    """Static-path layout for one base station.

    A cell is NLOS when the segment from the BS to its center touches a
    building rectangle ``(x0, y0, x1, y1)``. Reflected paths bounce off the
    cell's nearest points in ``scatterers`` (rows ``x, y, reflectivity``),
    so they leave the BS toward the reflector and neighbouring cells share
    them. LOS cells get the geometric path with unit power plus 0-2 weak
    reflections; NLOS cells get 3-6 reflections sharing ``nlos_power``,
    weighted by reflectivity and ``exp(-distance / decay_length)``.
    """
    bs = np.asarray(bs_position, dtype=float)
    blocks = [box(*b) for b in buildings]
    refl_xy, refl = scatterers[:, :2], scatterers[:, 2]
    refl_angle = np.array([_departure_angle(bs, boresight, p) for p in refl_xy])
    tree = cKDTree(refl_xy)
    n_max = min(max(los_weak_paths[1], nlos_paths[1]), len(scatterers))
    powers, angles, los = [], [], []
    for c in grid.centers:
        seg = LineString([tuple(bs), tuple(c)])
        is_los = not any(seg.intersects(b) for b in blocks)
        dist, near = tree.query(c, k=n_max)
        dist, near = np.atleast_1d(dist), np.atleast_1d(near)
        if is_los:
            k = min(int(rng.integers(los_weak_paths[0], los_weak_paths[1] + 1)), n_max)
            ang = np.concatenate([[_departure_angle(bs, boresight, c)], refl_angle[near[:k]]])
            pw = np.concatenate([[1.0], weak_power[0] + (weak_power[1] - weak_power[0]) * refl[near[:k]]])
        else:
            k = min(int(rng.integers(nlos_paths[0], nlos_paths[1] + 1)), n_max)
            ang = refl_angle[near[:k]]
            pw = refl[near[:k]] * np.exp(-dist[:k] / decay_length)
            pw *= nlos_power / pw.sum()
        powers.append(pw)
        angles.append(ang)
        los.append(is_los)
    mean_static = float(np.mean([p.sum() for p in powers]))
    return ScattererLayout(
        path_powers=tuple(powers),
        path_angles=tuple(angles),
        los=np.asarray(los, dtype=bool),
        moving_power=moving_ratio * mean_static,
    )


def noise_variance_from_snr(mean_energy: float, snr_db: float) -> float:
    """sigma_n^2 = E||h||^2 / 10^(SNR/10)."""
    return float(mean_energy / 10 ** (snr_db / 10.0))


@dataclass
class Trajectory:
    cells: np.ndarray  # (T,)
    channels: np.ndarray  # (T, n_bs, N)
    timestamps: np.ndarray  # (T,)

    def __len__(self) -> int:
        return len(self.cells)

    def to_csv(self, path, grid: Grid) -> None:
        xy = grid.centers[self.cells]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cell", "x", "y"])
            for t, c, (x, y) in zip(self.timestamps, self.cells, xy):
                w.writerow([f"{t:.6g}", int(c), f"{x:.6f}", f"{y:.6f}"])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (timestamps, cells) from a CSV written by :meth:`Trajectory.to_csv`."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    return data["t"].astype(float), data["cell"].astype(int)


@dataclass(frozen=True)
class Scenario:
    """Immutable synthetic world with one or more base stations."""

    grid: Grid
    mobility: MobilityModel
    n_antennas: int
    gamma: float
    base_stations: tuple[BaseStation, ...]
    snr_db: float = 20.0
    noise_variance_override: float | None = None
    seed: int = 0
    config: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        ChannelParams(self.n_antennas, self.gamma)  # validates

    @property
    def n_bs(self) -> int:
        return len(self.base_stations)

    @cached_property
    def transitions(self) -> TransitionModel:
        return TransitionModel(self.grid, self.mobility)

    @cached_property
    def _covariances(self) -> tuple[np.ndarray, ...]:
        out = []
        for bs in self.base_stations:
            C = np.stack([true_covariance(i, bs.layout, self.n_antennas) for i in range(self.grid.n_cells)])
            C.setflags(write=False)
            out.append(C)
        return tuple(out)

    @cached_property
    def _sqrt_covariances(self) -> tuple[np.ndarray, ...]:
        return tuple(psd_sqrt(C) for C in self._covariances)

    def covariances(self, bs: int = 0) -> np.ndarray:
        """Ground-truth C(x) for every cell, shape (n_cells, N, N)."""
        return self._covariances[bs]

    def mean_energy(self, bs: int = 0) -> float:
        """E||h||^2 under a uniform position prior."""
        return float(np.mean(np.real(np.trace(self._covariances[bs], axis1=1, axis2=2))))

    def noise_variance(self, bs: int = 0, snr_db: float | None = None) -> float:
        if snr_db is None and self.noise_variance_override is not None:
            return self.noise_variance_override
        return noise_variance_from_snr(self.mean_energy(bs), self.snr_db if snr_db is None else snr_db)

    def params(self, bs: int = 0, snr_db: float | None = None) -> ChannelParams:
        return ChannelParams(self.n_antennas, self.gamma, self.noise_variance(bs, snr_db))

    def with_overrides(self, **changes) -> "Scenario":
        from dataclasses import replace

        return replace(self, **changes)

    # -- simulation -------------------------------------------------------

    def simulate_channels(self, cells: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """AR(1) channels along a cell sequence for every BS; h_1 drawn from the stationary law."""
        T = len(cells)
        N = self.n_antennas
        g = self.gamma
        H = np.empty((T, self.n_bs, N), dtype=complex)
        for q in range(self.n_bs):
            roots = self._sqrt_covariances[q]
            H[0, q] = roots[cells[0]] @ complex_normal(rng, N)
            for t in range(1, T):
                u = roots[cells[t]] @ complex_normal(rng, N)
                H[t, q] = g * H[t - 1, q] + np.sqrt(1.0 - g * g) * u
        return H

    def simulate(self, length: int, seed=None, initial_cell: int | None = None) -> Trajectory:
        rng = np.random.default_rng(seed)
        cells = sample_trajectory(self.transitions, self.grid, length, rng, initial_cell)
        return self.trajectory_from_cells(cells, rng)

    def trajectory_from_cells(self, cells, rng: np.random.Generator) -> Trajectory:
        cells = np.asarray(cells, dtype=int)
        self.grid.check(cells)
        H = self.simulate_channels(cells, rng)
        ts = np.arange(len(cells)) * self.mobility.slot_duration
        return Trajectory(cells=cells, channels=H, timestamps=ts)

    def sample_channels(self, cell: int, n: int, rng: np.random.Generator, bs: int = 0) -> np.ndarray:
        """n independent draws from CN(0, C(cell)), shape (n, N)."""
        Z = complex_normal(rng, (n, self.n_antennas))
        return Z @ self._sqrt_covariances[bs][cell].T

    # -- construction -----------------------------------------------------

    @classmethod
    def from_config(cls, cfg: dict) -> "Scenario":
        cfg = dict(cfg)
        g = cfg.get("grid", {})
        grid = Grid(
            n_rows=int(g.get("n_rows", 20)),
            n_cols=int(g.get("n_cols", 20)),
            resolution=float(g.get("resolution", 5.0)),
            origin=tuple(g.get("origin", (0.0, 0.0))),
        )
        m = cfg.get("mobility", {})
        mobility = MobilityModel(
            mean_velocity=tuple(m.get("mean_velocity", (0.0, 0.0))),
            max_speed=float(m.get("max_speed", 15.0)),
            slot_duration=float(m.get("slot_duration", 0.5)),
            length_scale=float(m.get("length_scale", 1.0)),
        )
        ch = cfg.get("channel", {})
        n_ant = int(ch.get("n_antennas", 16))
        gamma = float(ch.get("gamma", 0.3))
        seed = int(cfg.get("seed", 0))
        sc = cfg.get("scatterers", {})
        buildings = [tuple(map(float, b)) for b in sc.get("buildings", [])]
        rng = np.random.default_rng(seed)
        if "n_buildings" in sc:
            buildings += _random_buildings(grid, int(sc["n_buildings"]), rng)
        scatterers = generate_scatterers(grid, int(sc.get("n_scatterers", 40)), rng)
        bs_list = cfg.get("base_stations") or [{"position": [-40.0, grid.origin[1] + grid.n_rows * grid.resolution / 2]}]
        stations = []
        for b in bs_list:
            pos = tuple(map(float, b["position"]))
            boresight = float(b.get("boresight", _face_grid(grid, pos)))
            layout = generate_layout(
                grid,
                pos,
                boresight,
                buildings,
                scatterers,
                rng,
                los_weak_paths=tuple(sc.get("los_weak_paths", (0, 2))),
                weak_power=tuple(sc.get("weak_power", (0.05, 0.2))),
                nlos_paths=tuple(sc.get("nlos_paths", (3, 6))),
                nlos_power=float(sc.get("nlos_power", 0.5)),
                decay_length=float(sc.get("decay_length", 20.0)),
                moving_ratio=float(sc.get("moving_ratio", 0.01)),
            )
            stations.append(BaseStation(pos, boresight, layout))
        nv = ch.get("noise_variance")
        return cls(
            grid=grid,
            mobility=mobility,
            n_antennas=n_ant,
            gamma=gamma,
            base_stations=tuple(stations),
            snr_db=float(ch.get("snr_db", 20.0)),
            noise_variance_override=None if nv is None else float(nv),
            seed=seed,
            config=cfg,
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_config(load_config(path))


def load_config(path) -> dict:
    text = Path(path).read_text()
    cfg = yaml.safe_load(text)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: expected a key-value mapping at top level")
    return cfg


def _face_grid(grid: Grid, pos) -> float:
    c = grid.centers.mean(axis=0)
    return float(np.arctan2(c[1] - pos[1], c[0] - pos[0]))


def _random_buildings(grid: Grid, n: int, rng: np.random.Generator) -> list[tuple[float, ...]]:
    x0, y0 = grid.origin
    W, H = grid.n_cols * grid.resolution, grid.n_rows * grid.resolution
    out = []
    for _ in range(n):
        w, h = rng.uniform(0.05, 0.15) * W, rng.uniform(0.1, 0.3) * H
        x, y = x0 + rng.uniform(0, W - w), y0 + rng.uniform(0, H - h)
        out.append((x, y, x + w, y + h))
    return out
