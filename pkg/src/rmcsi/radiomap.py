"""Radio map: one Hermitian channel covariance per grid cell.

Maps are immutable. The on-disk format is

    b"RMAP1"
    <IIdddIB  n_rows, n_cols, resolution, origin_x, origin_y, n_antennas, flags
    cells     row-major per cell, interleaved (re, im), float32 or float64
    [int64    sample count per cell]          if flags & HAS_COUNTS
    [float64  moving-scatter floor]           if flags & HAS_FLOOR

all little-endian.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._linalg import flag, hermitian, psd_project
from .scenario import Grid, Scenario

MAGIC = b"RMAP1"
_HEADER = struct.Struct("<IIdddIB")
DOUBLE = 0x1
HAS_COUNTS = 0x2
HAS_FLOOR = 0x4
_CHUNK = 1024  # cells per block for validation and I/O


class MapFormatError(ValueError):
    """Malformed or truncated radio-map file."""


@dataclass(frozen=True, eq=False)
class RadioMap:
    grid: Grid
    covariances: np.ndarray  # (n_cells, N, N) complex
    sample_counts: np.ndarray | None = None
    moving_power: float = 0.0  # sigma_h^2, used as regularization floor when known

    def __post_init__(self):
        cov = self.covariances
        if not (isinstance(cov, np.ndarray) and not cov.flags.writeable):
            cov = np.array(cov, copy=True)
            cov.setflags(write=False)
            object.__setattr__(self, "covariances", cov)
        if cov.ndim != 3 or cov.shape[1] != cov.shape[2]:
            raise ValueError("covariances must have shape (n_cells, N, N)")
        if cov.shape[0] != self.grid.n_cells:
            raise ValueError(f"need one matrix per cell: got {cov.shape[0]}, grid has {self.grid.n_cells}")
        if not np.iscomplexobj(cov):
            raise ValueError("covariances must be complex")
        tol = 1e-10 if cov.dtype == np.complex128 else 1e-5
        for lo in range(0, cov.shape[0], _CHUNK):
            blk = cov[lo : lo + _CHUNK]
            scale = np.maximum(1.0, np.abs(blk).max(axis=(1, 2)))
            asym = np.abs(blk - np.conj(np.swapaxes(blk, 1, 2))).max(axis=(1, 2))
            if np.any(asym > tol * scale):
                bad = lo + int(np.argmax(asym > tol * scale))
                raise ValueError(f"covariance of cell {bad} is not Hermitian")
        if self.sample_counts is not None:
            counts = np.asarray(self.sample_counts, dtype=np.int64).copy()
            if counts.shape != (cov.shape[0],) or np.any(counts < 0):
                raise ValueError("sample_counts must hold one nonnegative integer per cell")
            counts.setflags(write=False)
            object.__setattr__(self, "sample_counts", counts)

    @property
    def n_antennas(self) -> int:
        return self.covariances.shape[1]

    @property
    def n_cells(self) -> int:
        return self.covariances.shape[0]

    def lookup(self, cell: int) -> np.ndarray:
        return lookup(self, cell)

    def as_double(self) -> np.ndarray:
        """All covariances as a complex128 array (copy for single-precision maps)."""
        return np.asarray(self.covariances, dtype=np.complex128)

    def projected(self) -> "RadioMap":
        """Same map with every matrix clipped to the PSD cone."""
        return RadioMap(self.grid, psd_project(self.as_double()), self.sample_counts, self.moving_power)

    def equals(self, other: "RadioMap") -> bool:
        """Exact (bitwise) equality of grid, matrices, and counts."""
        same_counts = (self.sample_counts is None and other.sample_counts is None) or (
            self.sample_counts is not None
            and other.sample_counts is not None
            and np.array_equal(self.sample_counts, other.sample_counts)
        )
        return (
            self.grid == other.grid
            and self.covariances.dtype == other.covariances.dtype
            and np.array_equal(self.covariances, other.covariances)
            and same_counts
            and self.moving_power == other.moving_power
        )


def lookup(radio_map: RadioMap, cell: int) -> np.ndarray:
    """Stored C(x) for ``cell`` (a read-only view)."""
    if not 0 <= int(cell) < radio_map.n_cells:
        raise IndexError(f"cell {cell} outside map with {radio_map.n_cells} cells")
    return radio_map.covariances[int(cell)]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def map_from_samples(
    grid: Grid,
    cells: np.ndarray,
    channels: np.ndarray,
    fallback_level: float,
    moving_power: float | None = None,
) -> RadioMap:
    """Per-cell sample mean of h h^H from labelled channel samples.

    Cells without samples get ``fallback_level * I`` and raise a warning.
    """
    cells = np.asarray(cells, dtype=int)
    channels = np.asarray(channels, dtype=complex)
    if channels.ndim != 2 or channels.shape[0] != cells.shape[0]:
        raise ValueError("channels must have shape (n_samples, N) matching cells")
    grid.check(cells)
    K, N = grid.n_cells, channels.shape[1]
    acc = np.zeros((K, N, N), dtype=complex)
    np.add.at(acc, cells, channels[:, :, None] * channels.conj()[:, None, :])
    counts = np.bincount(cells, minlength=K)
    empty = counts == 0
    acc[~empty] /= counts[~empty, None, None]
    if np.any(empty):
        flag(f"{int(empty.sum())} cells have no samples; filled with {fallback_level:.3g} * I")
        acc[empty] = fallback_level * np.eye(N)
    return RadioMap(
        grid,
        hermitian(acc),
        counts,
        float(fallback_level if moving_power is None else moving_power),
    )


def build_perfect_map(
    scenario: Scenario,
    samples_per_cell: int,
    rng=None,
    bs: int = 0,
    exact: bool = False,
) -> RadioMap:
    """Map from ground-truth channels of ``scenario`` for base station ``bs``.

    With ``exact=True`` the true covariances are stored directly; otherwise
    each cell holds the sample mean of ``samples_per_cell`` channel draws.
    """
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be >= 1")
    layout = scenario.base_stations[bs].layout
    K = scenario.grid.n_cells
    if exact:
        counts = np.zeros(K, dtype=np.int64)
        return RadioMap(scenario.grid, scenario.covariances(bs), counts, layout.moving_power)
    rng = np.random.default_rng(rng)
    N = scenario.n_antennas
    acc = np.empty((K, N, N), dtype=complex)
    for i in range(K):
        H = scenario.sample_channels(i, samples_per_cell, rng, bs)
        acc[i] = H.T @ H.conj() / samples_per_cell
    counts = np.full(K, samples_per_cell, dtype=np.int64)
    return RadioMap(scenario.grid, hermitian(acc), counts, layout.moving_power)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_map(radio_map: RadioMap, path, precision: str = "single") -> None:
    if precision not in ("single", "double"):
        raise ValueError("precision must be 'single' or 'double'")
    g = radio_map.grid
    flags = (DOUBLE if precision == "double" else 0) | (HAS_COUNTS if radio_map.sample_counts is not None else 0)
    flags |= HAS_FLOOR if radio_map.moving_power else 0
    dtype = np.dtype("<c16" if precision == "double" else "<c8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(g.n_rows, g.n_cols, g.resolution, g.origin[0], g.origin[1], radio_map.n_antennas, flags))
        cov = radio_map.covariances
        for lo in range(0, radio_map.n_cells, _CHUNK):
            fh.write(np.ascontiguousarray(cov[lo : lo + _CHUNK], dtype=dtype).tobytes())
        if radio_map.sample_counts is not None:
            fh.write(np.asarray(radio_map.sample_counts, dtype="<i8").tobytes())
        if flags & HAS_FLOOR:
            fh.write(struct.pack("<d", radio_map.moving_power))


def expected_file_size(n_cells: int, n_antennas: int, precision: str = "single", counts: bool = False) -> int:
    item = 16 if precision == "double" else 8
    return len(MAGIC) + _HEADER.size + n_cells * n_antennas**2 * item + (8 * n_cells if counts else 0)


def load_map(path) -> RadioMap:
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise MapFormatError(f"{path}: bad magic {magic!r}")
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise MapFormatError(f"{path}: truncated header")
        n_rows, n_cols, res, ox, oy, n_ant, flags = _HEADER.unpack(raw)
        if n_rows == 0 or n_cols == 0 or n_ant == 0 or not res > 0:
            raise MapFormatError(f"{path}: invalid dimensions in header")
        if flags & ~(DOUBLE | HAS_COUNTS | HAS_FLOOR):
            raise MapFormatError(f"{path}: unknown flag bits {flags:#x}")
        n_cells = n_rows * n_cols
        dtype = np.dtype("<c16" if flags & DOUBLE else "<c8")
        expected = (
            len(MAGIC)
            + _HEADER.size
            + n_cells * n_ant * n_ant * dtype.itemsize
            + (8 * n_cells if flags & HAS_COUNTS else 0)
            + (8 if flags & HAS_FLOOR else 0)
        )
        if size < expected:
            raise MapFormatError(f"{path}: truncated file ({size} bytes, expected {expected})")
        if size > expected:
            raise MapFormatError(f"{path}: {size - expected} trailing bytes; dimension mismatch")
        cov = np.fromfile(fh, dtype=dtype, count=n_cells * n_ant * n_ant).reshape(n_cells, n_ant, n_ant)
        counts = np.fromfile(fh, dtype="<i8", count=n_cells) if flags & HAS_COUNTS else None
        floor = struct.unpack("<d", fh.read(8))[0] if flags & HAS_FLOOR else 0.0
    cov = cov.astype(cov.dtype.newbyteorder("="), copy=False)
    cov.setflags(write=False)
    grid = Grid(n_rows, n_cols, res, (ox, oy))
    return RadioMap(grid, cov, counts, floor)


def summarize_map(radio_map: RadioMap) -> list[dict]:
    """Per-cell trace, numerical rank, and participation-ratio effective rank."""
    rows = []
    centers = radio_map.grid.centers
    for i in range(radio_map.n_cells):
        C = np.asarray(radio_map.covariances[i], dtype=complex)
        w = np.clip(np.linalg.eigvalsh(C), 0.0, None)
        tr = float(w.sum())
        rows.append(
            {
                "cell": i,
                "x": float(centers[i, 0]),
                "y": float(centers[i, 1]),
                "trace": tr,
                "rank": int(np.linalg.matrix_rank(C, hermitian=True)),
                "effective_rank": tr**2 / float(np.sum(w**2)) if tr > 0 else 0.0,
                "samples": -1 if radio_map.sample_counts is None else int(radio_map.sample_counts[i]),
            }
        )
    return rows
