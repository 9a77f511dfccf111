"""Blind radio-map construction from unlabelled compressed observations.

The builder alternates two steps: decode the most likely cell sequence
under the current map (a Viterbi pass with a penalty pulling the path
toward coarse position hints), then re-estimate each cell's covariance
from the observations assigned to it with an unbiased compressive
estimator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ._linalg import flag, hermitian, psd_project
from .radiomap import RadioMap
from .scenario import Grid, TransitionModel

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class ObservationSequence:
    """Compressed observations of one pass along a route.

    ``y`` has shape (T, n_bs, M) and ``A`` (T, n_bs, M, N); ``coarse`` holds
    the coarse position hints (T, 2). ``true_cells`` is optional ground truth
    used only for reporting.
    """

    y: np.ndarray
    A: np.ndarray
    noise_variance: np.ndarray  # (n_bs,)
    coarse: np.ndarray
    true_cells: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y)
        self.A = np.asarray(self.A)
        self.noise_variance = np.atleast_1d(np.asarray(self.noise_variance, dtype=float))
        self.coarse = np.asarray(self.coarse, dtype=float)
        if self.y.ndim == 2:  # single BS
            self.y, self.A = self.y[:, None], self.A[:, None]
        T = self.y.shape[0]
        if self.A.shape[:3] != self.y.shape or self.coarse.shape != (T, 2):
            raise ValueError("observation, sensing and coarse-position lengths disagree")
        if self.noise_variance.shape != (self.n_bs,):
            raise ValueError("need one noise variance per base station")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_bs(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class BuilderConfig:
    mu: float = 0.05
    epsilon: float = 0.5
    max_iters: int = 10
    moments: str = "complex"
    thin: bool = True

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.epsilon <= 0 or self.max_iters < 1:
            raise ValueError("epsilon must be positive and max_iters >= 1")
        if self.moments not in ("complex", "real"):
            raise ValueError("moments must be 'complex' or 'real'")


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray  # raw Hermitian estimate, not PSD-projected
    n_samples: int
    bound: tuple[float, float, float, float] | None = None


@dataclass
class IterationRecord:
    iteration: int
    mean_change: float
    objective: float
    localization_error: float = float("nan")


@dataclass
class BuildResult:
    maps: list[RadioMap]
    paths: list[np.ndarray]
    raw: list[np.ndarray]  # per BS, (K, N, N) unprojected estimates
    counts: np.ndarray
    history: list[IterationRecord] = field(default_factory=list)
    converged: bool = False


def coarse_positions(grid: Grid, cells, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Cell centers plus i.i.d. Gaussian shifts of ``noise_std`` metres per axis."""
    xy = grid.centers[np.asarray(cells)]
    return xy + noise_std * rng.standard_normal(xy.shape)


# ---------------------------------------------------------------------------
# Viterbi decoding
# ---------------------------------------------------------------------------


def viterbi(log_emission: np.ndarray, log_transition, log_initial: np.ndarray) -> tuple[np.ndarray, float]:
    """Most likely state path of an HMM, and its log score.

    ``log_transition`` is a :class:`TransitionModel`, a dense (K, K) array of
    log-probabilities (``-inf`` for impossible moves), or a scipy sparse
    matrix of plain probabilities. Ties are broken toward the lowest index,
    at the final state and at every back-pointer.
    """
    T, K = log_emission.shape
    src, dst, logp = _edge_list(log_transition, K)
    src, dst = src.astype(np.int64), dst.astype(np.int64)
    order = np.lexsort((src, dst))
    src, dst, logp = src[order], dst[order], logp[order]
    starts = np.flatnonzero(np.r_[True, dst[1:] != dst[:-1]])
    targets = dst[starts]
    counts = np.diff(np.r_[starts, len(dst)])

    score = log_initial + log_emission[0]
    if not np.isfinite(score).any():
        raise ValueError("no feasible cell at step 0")
    back = np.zeros((T, K), dtype=np.int64)
    big = np.iinfo(np.int64).max
    for t in range(1, T):
        cand = score[src] + logp
        best = np.maximum.reduceat(cand, starts)
        is_best = (cand == np.repeat(best, counts)) & np.isfinite(cand)
        arg = np.minimum.reduceat(np.where(is_best, src, big), starts)
        new = np.full(K, -np.inf)
        new[targets] = best
        back[t, targets] = np.where(arg == big, 0, arg)
        score = new + log_emission[t]
        if not np.isfinite(score).any():
            raise ValueError(f"no feasible cell at step {t}")
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(score))
    total = float(score[path[-1]])
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, total


def _edge_list(trans, K: int):
    if isinstance(trans, TransitionModel):
        return trans.edges()
    if sp.issparse(trans):
        coo = trans.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), np.log(coo.data)
    trans = np.asarray(trans, dtype=float)
    if trans.shape != (K, K):
        raise ValueError("transition matrix must be K x K")
    src, dst = np.nonzero(np.isfinite(trans))
    return src.astype(np.int64), dst.astype(np.int64), trans[src, dst]


def emission_loglik(
    y: np.ndarray,
    A: np.ndarray,
    covariances: Sequence[np.ndarray],
    noise_variance: np.ndarray,
) -> np.ndarray:
    """Summed over BSs: -y^H S^-1 y - log|S| with S = A_t C(x) A_t^H + sigma^2 I,
    for every slot and cell, shape (T, K)."""
    T, n_bs, M, N = A.shape
    K = covariances[0].shape[0]
    out = np.zeros((T, K))
    for q in range(n_bs):
        Aq = A[:, q]
        # S[t, k, m, n] = sum_ij A[t,m,i] C[k,i,j] conj(A[t,n,j]) as one matrix product
        W = np.einsum("tmi,tnj->tmnij", Aq, Aq.conj()).reshape(T * M * M, N * N)
        S = (W @ covariances[q].reshape(K, N * N).T).reshape(T, M, M, K)
        S = np.moveaxis(S, 3, 1) + noise_variance[q] * np.eye(M)
        yq = y[:, q]
        if M == 1:
            s = np.real(S[..., 0, 0])
            out += -np.abs(yq[:, :1]) ** 2 / s - np.log(s)
        else:
            S = hermitian(S)
            rhs = np.broadcast_to(yq[:, None, :, None], (T, K, M, 1))
            sol = np.linalg.solve(S, rhs)[..., 0]
            quad = np.real(np.einsum("tm,tkm->tk", yq.conj(), sol))
            out += -quad - np.linalg.slogdet(S)[1]
    return out


def viterbi_decode(
    seq: ObservationSequence,
    covariances: Sequence[np.ndarray] | None,
    transitions: TransitionModel,
    mu: float,
) -> tuple[np.ndarray, float]:
    """Cell path maximizing emissions + mobility prior - mu * distance to the coarse hints.

    ``covariances=None`` drops the emission term, which is what identical
    per-cell covariances amount to.
    """
    grid = transitions.grid
    K = grid.n_cells
    dist = np.linalg.norm(grid.centers[None, :, :] - seq.coarse[:, None, :], axis=2)
    log_em = -mu * dist
    if covariances is not None:
        log_em = log_em + emission_loglik(seq.y, seq.A, covariances, seq.noise_variance)
    return viterbi(log_em, transitions, np.full(K, -np.log(K)))


# ---------------------------------------------------------------------------
# Covariance estimation
# ---------------------------------------------------------------------------


def projection_moments(N: int, M: int, moments: str = "complex") -> tuple[float, float]:
    """(a, b) with E[P X P] = a X + b tr(X) I for a random rank-M projector P.

    ``complex`` is exact for Haar-random complex subspaces; ``real`` gives the
    real orthogonal-group constants.
    """
    if N < 2:
        raise ValueError("need at least 2 antennas")
    if moments == "complex":
        d = N * (N * N - 1)
        return M * (N * M - 1) / d, M * (N - M) / d
    if moments == "real":
        d = N * (N + 2) * (N - 1)
        return M * (M * N + N - 2) / d, M * (N - M) / d
    raise ValueError("moments must be 'complex' or 'real'")


def unbiased_covariance(
    y: np.ndarray,
    A: np.ndarray,
    noise_variance: float,
    moments: str = "complex",
) -> CovarianceEstimate:
    """Unbiased estimate of C from compressed samples y_t = A_t h_t + n_t.

    ``y`` is (n, M) and ``A`` is (n, M, N) with Haar-random row spaces.
    Forms phi_t = A_t^H y_t, the rescaled sample covariance
    (N/M)^2 mean(phi phi^H), and the sensing average mean(A^H A), removes
    the noise contribution and inverts the projector moments.
    """
    y = np.asarray(y)
    if isinstance(A, (list, tuple)):
        if len({a.shape for a in A}) > 1:
            raise ValueError("all sensing matrices in a cell must have the same shape")
        A = np.stack(A)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    M, N = A.shape[1], A.shape[2]
    if A.shape[0] != n or y.shape[1] != M:
        raise ValueError("observations and sensing matrices disagree in shape")
    if N < 2:
        raise ValueError("need at least 2 antennas")
    phi = np.einsum("tmn,tm->tn", A.conj(), y)
    omega_y = (N / M) ** 2 * (phi.T @ phi.conj()) / n
    omega_a = np.einsum("tmi,tmj->ij", A.conj(), A) / n
    G = (M / N) ** 2 * omega_y - noise_variance * omega_a
    a, b = projection_moments(N, M, moments)
    C = (G - (b * N / M) * np.real(np.trace(G)) * np.eye(N)) / a
    return CovarianceEstimate(hermitian(C), n)


def bound_diagnostic(
    C_est: np.ndarray | float,
    rank: int,
    n_antennas: int,
    M: int,
    n_samples: int,
    zeta: float,
) -> tuple[float, float, float, float]:
    """(S1, S2, S3, rhs) of the high-probability error bound, without the universal constant.

    ``C_est`` is a covariance (its spectral norm is used) or the norm itself.
    """
    N, R, n = n_antennas, rank, n_samples
    if N < 2:
        raise ValueError("need at least 2 antennas")
    if not 0 < zeta < 1:
        raise ValueError("zeta must lie in (0, 1)")
    if n < N * math.log(1 / zeta):
        raise ValueError(f"need n_samples >= N log(1/zeta) = {N * math.log(1 / zeta):.2f}")
    L = math.log(n * N / zeta)
    s1 = math.sqrt(N * R**2 * L**2) / M
    s2 = math.sqrt(R * math.log(1 / zeta))
    s3 = N * R * L**2 / (math.sqrt(n) * M)
    norm = float(C_est) if np.ndim(C_est) == 0 else float(np.linalg.norm(C_est, 2))
    return s1, s2, s3, norm / math.sqrt(n) * (s1 + s2 + s3)


def thin_indices(cells: np.ndarray, stride: int) -> np.ndarray:
    """Slots kept after thinning: per cell, at least ``stride`` slots apart."""
    keep = []
    last: dict[int, int] = {}
    for t, c in enumerate(cells):
        c = int(c)
        if c not in last or t - last[c] >= stride:
            keep.append(t)
            last[c] = t
    return np.asarray(keep, dtype=np.int64)


def thinning_stride(gamma: float) -> int:
    return 1 if gamma <= 0 else (np.iinfo(np.int32).max if gamma >= 1 else math.ceil(1.0 / (1.0 - gamma) - 1e-9))


def estimate_covariances(
    sequences: Sequence[ObservationSequence],
    paths: Sequence[np.ndarray],
    n_cells: int,
    gamma: float,
    config: BuilderConfig = BuilderConfig(),
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-BS raw covariance estimates for every cell from assigned samples.

    Cells without samples get an identity scaled to the mean per-antenna
    energy of the data.
    """
    n_bs = sequences[0].n_bs
    N = sequences[0].A.shape[-1]
    stride = thinning_stride(gamma) if config.thin else 1
    picks = [thin_indices(p, stride) for p in paths]
    cells = np.concatenate([p[k] for p, k in zip(paths, picks)])
    counts = np.bincount(cells, minlength=n_cells)
    out = []
    for q in range(n_bs):
        y = np.concatenate([s.y[k, q] for s, k in zip(sequences, picks)])
        A = np.concatenate([s.A[k, q] for s, k in zip(sequences, picks)])
        sig = sequences[0].noise_variance[q]
        M = A.shape[1]
        phi_energy = np.sum(np.abs(y) ** 2, axis=1) * N / M - sig * N
        level = max(float(np.mean(phi_energy)) / N, 1e-12)
        est = np.empty((n_cells, N, N), dtype=complex)
        order = np.argsort(cells, kind="stable")
        bounds = np.r_[0, np.cumsum(counts)]
        for i in range(n_cells):
            if counts[i] == 0:
                est[i] = level * np.eye(N)
                continue
            idx = order[bounds[i] : bounds[i + 1]]
            est[i] = unbiased_covariance(y[idx], A[idx], sig, config.moments).matrix
        out.append(est)
    return out, counts


# ---------------------------------------------------------------------------
# Alternating construction
# ---------------------------------------------------------------------------


def build_map(
    sequences: ObservationSequence | Sequence[ObservationSequence],
    transitions: TransitionModel,
    gamma: float,
    config: BuilderConfig = BuilderConfig(),
    initial_covariances: Sequence[np.ndarray] | None = None,
) -> BuildResult:
    """Alternate path decoding and covariance estimation until the mean
    per-slot position change drops below ``config.epsilon`` metres.

    Starts from identity covariances (or ``initial_covariances``, one
    (K, N, N) stack per BS) and the coarse positions. If
    ``max_iters`` is reached first, the iterate with the smallest position
    change is returned and a warning is raised.
    """
    if isinstance(sequences, ObservationSequence):
        sequences = [sequences]
    if any(len(s) < 1 for s in sequences):
        raise ValueError("every sequence needs at least one slot")
    grid = transitions.grid
    centers = grid.centers
    K = grid.n_cells
    prev_xy = [s.coarse for s in sequences]
    covs = None if initial_covariances is None else [np.asarray(c) for c in initial_covariances]
    history: list[IterationRecord] = []
    best = None
    converged = False
    for it in range(1, config.max_iters + 1):
        decoded = [viterbi_decode(s, covs, transitions, config.mu) for s in sequences]
        paths = [d[0] for d in decoded]
        objective = float(sum(d[1] for d in decoded))
        xy = [centers[p] for p in paths]
        change = float(np.mean(np.concatenate([np.linalg.norm(a - b, axis=1) for a, b in zip(xy, prev_xy)])))
        raw, counts = estimate_covariances(sequences, paths, K, gamma, config)
        covs = [psd_project(r) for r in raw]
        rec = IterationRecord(it, change, objective, _loc_error(sequences, paths, centers))
        history.append(rec)
        logger.info("iteration %d: mean change %.3f m, objective %.3f", it, change, objective)
        if best is None or change <= best[0]:
            best = (change, paths, raw, covs, counts)
        prev_xy = xy
        if change < config.epsilon:
            converged = True
            best = (change, paths, raw, covs, counts)
            break
    if not converged:
        flag(f"map construction did not converge in {config.max_iters} iterations")
    _, paths, raw, covs, counts = best
    maps = [RadioMap(grid, c, counts) for c in covs]
    return BuildResult(maps, paths, raw, counts, history, converged)


def _loc_error(sequences, paths, centers) -> float:
    if any(s.true_cells is None for s in sequences):
        return float("nan")
    d = [np.linalg.norm(centers[p] - centers[s.true_cells], axis=1) for s, p in zip(sequences, paths)]
    return float(np.mean(np.concatenate(d)))
