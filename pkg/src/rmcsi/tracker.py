"""Radio-map-embedded switching Kalman filter.

The channel follows h_t = gamma h_{t-1} + sqrt(1 - gamma^2) u_t with
u_t ~ CN(0, C(p_t)); the filter tracks h_t together with the discrete cell
p_t, switching the process covariance through the radio map.

The free functions are the individual recursion steps and are usable on
their own; :class:`SwitchingKalmanTracker` strings them together and
handles several base stations sharing one position.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._linalg import complex_normal, flag, hermitian, psd_sqrt
from .radiomap import RadioMap
from .scenario import TransitionModel
from .sensing import adaptive_sensing, entropy_gap, random_semi_unitary

Sensor = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Map-derived quantities
# ---------------------------------------------------------------------------


class MapModel:
    """Double-precision covariances plus the regularized inverses used for
    position tracking, ``C + eps I`` with ``eps = max(sigma_h^2, 1e-6 tr C / N)``."""

    def __init__(self, radio_map: RadioMap, floor: float | None = None):
        self.radio_map = radio_map
        self.covariances = radio_map.as_double()
        K, N, _ = self.covariances.shape
        floor = radio_map.moving_power if floor is None else floor
        tr = np.real(np.trace(self.covariances, axis1=1, axis2=2))
        self.epsilon = np.maximum(floor, 1e-6 * tr / N)
        reg = self.covariances + self.epsilon[:, None, None] * np.eye(N)
        self.reg_inverse = hermitian(np.linalg.inv(reg))
        self.reg_logdet = np.linalg.slogdet(reg)[1]

    @property
    def n_antennas(self) -> int:
        return self.covariances.shape[1]

    @property
    def n_cells(self) -> int:
        return self.covariances.shape[0]


def _as_model(m) -> MapModel:
    return m if isinstance(m, MapModel) else MapModel(m)


def _quad(v: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Real part of v^H X v for each matrix in a stack."""
    return np.real(np.einsum("i,kij,j->k", v.conj(), inv, v))


def observation_loglik(y: np.ndarray, A: np.ndarray, covariances: np.ndarray, noise_variance: float) -> np.ndarray:
    """-y^H S^-1 y - log|S| with S = A C A^H + sigma^2 I, for each C in a stack.

    Constants shared by all cells are dropped.
    """
    M = A.shape[0]
    S = A @ covariances @ A.conj().T + noise_variance * np.eye(M)
    S = hermitian(S)
    sol = np.linalg.solve(S, np.broadcast_to(y[:, None], S.shape[:-1] + (1,)))[..., 0]
    quad = np.real(np.einsum("i,ki->k", y.conj(), sol))
    return -quad - np.linalg.slogdet(S)[1]


def _normalize_log(logw: np.ndarray, fallback: np.ndarray, what: str) -> np.ndarray:
    finite = np.isfinite(logw)
    if not finite.any():
        flag(f"{what}: posterior underflowed; falling back to the transition prior")
        return fallback / fallback.sum()
    w = np.zeros_like(logw)
    w[finite] = np.exp(logw[finite] - logw[finite].max())
    total = w.sum()
    if not total > 0:
        flag(f"{what}: posterior underflowed; falling back to the transition prior")
        return fallback / fallback.sum()
    return w / total


# ---------------------------------------------------------------------------
# Recursion steps
# ---------------------------------------------------------------------------


def position_posterior(
    y: np.ndarray | Sequence[np.ndarray],
    A: np.ndarray | Sequence[np.ndarray],
    radio_map: RadioMap | MapModel | Sequence,
    prev_cell: int | None,
    transitions: TransitionModel,
    noise_variance: float | Sequence[float],
    initial_prior: np.ndarray | None = None,
) -> np.ndarray:
    """P(p_t = x | y_t, p_{t-1}) over all cells (zero outside the reachable set).

    Several base stations can be given as parallel sequences; their
    likelihoods multiply against one shared prior. ``prev_cell=None``
    means no previous cell: ``initial_prior`` is used, uniform if omitted.
    """
    if isinstance(y, np.ndarray) and y.ndim == 1:
        y, A, radio_map, noise_variance = [y], [A], [radio_map], [noise_variance]
    models = [_as_model(m) for m in radio_map]
    K = models[0].n_cells
    if prev_cell is None:
        if initial_prior is None:
            idx, prior = np.arange(K), np.full(K, 1.0 / K)
        else:
            initial_prior = np.asarray(initial_prior, dtype=float)
            if initial_prior.shape != (K,) or np.any(initial_prior < 0) or not initial_prior.sum() > 0:
                raise ValueError("initial_prior must be a nonnegative vector over cells")
            idx = np.flatnonzero(initial_prior)
            prior = initial_prior[idx] / initial_prior.sum()
    else:
        idx, prior = transitions.support(prev_cell)
    if idx.size == 0:
        raise ValueError(f"cell {prev_cell} has no reachable cell")
    logw = np.log(prior)
    if idx.size > 1:
        for yq, Aq, mq, sq in zip(y, A, models, noise_variance):
            logw = logw + observation_loglik(yq, Aq, mq.covariances[idx], sq)
    out = np.zeros(K)
    out[idx] = _normalize_log(logw, prior, "position_posterior")
    return out


def mixture_covariance(covariances: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_x w(x) C(x) over cells with nonzero weight."""
    nz = np.flatnonzero(weights)
    return np.einsum("k,kij->ij", weights[nz], covariances[nz])


def predict(
    h_hat: np.ndarray,
    Q: np.ndarray,
    covariances: np.ndarray,
    weights: np.ndarray,
    gamma: float,
) -> tuple[np.ndarray, np.ndarray]:
    """h_pred = gamma h; Q_pred = gamma^2 Q + (1 - gamma^2) sum_x w(x) C(x)."""
    h_pred = gamma * h_hat
    Q_pred = gamma**2 * Q + (1.0 - gamma**2) * mixture_covariance(covariances, weights)
    return h_pred, hermitian(Q_pred)


def kalman_gain(Q_pred: np.ndarray, A: np.ndarray, noise_variance: float) -> np.ndarray:
    M = A.shape[0]
    AQ = A @ Q_pred
    S = hermitian(AQ @ A.conj().T + noise_variance * np.eye(M))
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        load = 1e-12 * max(float(np.real(np.trace(S))), 1.0)
        flag(f"singular innovation covariance; diagonal load {load:.1e}")
        S = S + load * np.eye(M)
    # K = Q A^H S^-1 = (S^-1 A Q)^H since S and Q are Hermitian
    return np.linalg.solve(S, AQ).conj().T


def kalman_update(
    h_pred: np.ndarray,
    Q_pred: np.ndarray,
    y: np.ndarray,
    A: np.ndarray,
    noise_variance: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Measurement update with the MMSE gain; Q is re-symmetrized."""
    K = kalman_gain(Q_pred, A, noise_variance)
    h = h_pred + K @ (y - A @ h_pred)
    Q = Q_pred - K @ (A @ Q_pred)
    return h, hermitian(Q)


def position_logscores(
    h_hat: np.ndarray,
    h_hat_prev: np.ndarray,
    model: MapModel,
    cells: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """log p(h_t - gamma h_{t-1} | (1 - gamma^2) C_reg(x)) for the given cells."""
    if not (np.all(np.isfinite(h_hat)) and np.all(np.isfinite(h_hat_prev))):
        raise ValueError("channel estimates must be finite")
    if gamma >= 1.0:
        return np.zeros(len(cells))
    delta = h_hat - gamma * h_hat_prev
    s = 1.0 - gamma**2
    N = model.n_antennas
    return -_quad(delta, model.reg_inverse[cells]) / s - (N * np.log(s) + model.reg_logdet[cells])


def track_position(
    h_hat,
    h_hat_prev,
    radio_map: RadioMap | MapModel | Sequence,
    prev_cell: int,
    transitions: TransitionModel,
    gamma: float,
) -> int:
    """Most probable current cell given the innovation of the channel estimate.

    With several base stations (parallel sequences of estimates and maps)
    the per-station posteriors are multiplied and the product maximized.
    Ties go to the lowest cell index.
    """
    if isinstance(h_hat, np.ndarray) and h_hat.ndim == 1:
        h_hat, h_hat_prev, radio_map = [h_hat], [h_hat_prev], [radio_map]
    idx, prior = transitions.support(prev_cell)
    if idx.size == 0:
        raise ValueError(f"cell {prev_cell} has no reachable cell")
    return int(idx[np.argmax(_fused_position_scores(h_hat, h_hat_prev, radio_map, idx, prior, gamma))])


def _fused_position_scores(h_hat, h_hat_prev, maps, idx, prior, gamma) -> np.ndarray:
    total = np.zeros(idx.size)
    for h, hp, m in zip(h_hat, h_hat_prev, maps):
        logp = position_logscores(h, hp, _as_model(m), idx, gamma) + np.log(prior)
        total += logp - np.logaddexp.reduce(logp)
    return total


# ---------------------------------------------------------------------------
# Full filter
# ---------------------------------------------------------------------------


@dataclass
class TrackerState:
    h_hat: np.ndarray  # (n_bs, N)
    Q: np.ndarray  # (n_bs, N, N)
    p_hat: int
    pi: np.ndarray  # (n_cells,)
    t: int = 1


@dataclass
class StepResult:
    state: TrackerState
    A: list[np.ndarray]
    y: list[np.ndarray]
    pi: np.ndarray
    Q_pred: np.ndarray
    logdet_pred: np.ndarray
    logdet_post: np.ndarray
    entropy_gap: np.ndarray
    fallbacks: list[str] = field(default_factory=list)


SensingRule = Callable[[np.ndarray, int, int], np.ndarray]


class SwitchingKalmanTracker:
    """Joint channel and position tracker for one user and one or more BSs.

    ``sensing`` is ``"adaptive"``, ``"random"``, or a callable
    ``(Q_pred, t, bs) -> A`` returning an M x N semi-unitary matrix.
    """

    def __init__(
        self,
        maps: RadioMap | MapModel | Sequence,
        transitions: TransitionModel,
        gamma: float,
        noise_variance: float | Sequence[float],
        n_pilots: int = 1,
        sensing: str | SensingRule = "adaptive",
        rng=None,
    ):
        if isinstance(maps, (RadioMap, MapModel)):
            maps = [maps]
        self.models = [_as_model(m) for m in maps]
        if np.ndim(noise_variance) == 0:
            noise_variance = [float(noise_variance)] * len(self.models)
        if len(noise_variance) != len(self.models):
            raise ValueError("need one noise variance per base station")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.transitions = transitions
        self.gamma = float(gamma)
        self.noise_variance = [float(s) for s in noise_variance]
        self.n_pilots = int(n_pilots)
        self.sensing = sensing
        self.rng = np.random.default_rng(rng)
        N = self.models[0].n_antennas
        if not 1 <= self.n_pilots <= N:
            raise ValueError("need 1 <= n_pilots <= n_antennas")
        if any(m.n_cells != transitions.grid.n_cells for m in self.models):
            raise ValueError("maps and transition model disagree on the number of cells")

    @property
    def n_bs(self) -> int:
        return len(self.models)

    def _design(self, Q_pred: np.ndarray, t: int, q: int) -> np.ndarray:
        if callable(self.sensing):
            return self.sensing(Q_pred, t, q)
        if self.sensing == "adaptive":
            return adaptive_sensing(Q_pred, self.n_pilots, self.rng)
        if self.sensing == "random":
            return random_semi_unitary(self.n_pilots, Q_pred.shape[0], self.rng)
        raise ValueError(f"unknown sensing rule {self.sensing!r}")

    def initialize(
        self,
        sensors: Sequence[Sensor],
        initial_prior: np.ndarray | None = None,
        initial_cell: int | None = None,
    ) -> StepResult:
        """First slot: random pilots and the posterior pi_1 under ``initial_prior``
        (uniform when omitted). The starting cell is ``initial_cell`` when the
        caller knows it, otherwise the argmax of pi_1; the channel guess is a
        draw from the map at that cell."""
        N = self.models[0].n_antennas
        As = [random_semi_unitary(self.n_pilots, N, self.rng) for _ in range(self.n_bs)]
        ys = [np.asarray(s(A)) for s, A in zip(sensors, As)]
        pi = position_posterior(
            ys, As, self.models, None, self.transitions, self.noise_variance, initial_prior=initial_prior
        )
        if initial_cell is None:
            p_hat = int(np.argmax(pi))
        else:
            self.transitions.grid.check(initial_cell)
            p_hat = int(initial_cell)
        g2 = 1.0 - self.gamma**2
        h = np.stack([psd_sqrt(m.covariances[p_hat]) @ complex_normal(self.rng, N) for m in self.models])
        Q = np.stack([hermitian(g2 * mixture_covariance(m.covariances, pi)) for m in self.models])
        state = TrackerState(h, Q, p_hat, pi, t=1)
        nan = np.full(self.n_bs, np.nan)
        return StepResult(state, As, ys, pi, Q.copy(), nan, nan, nan)

    def step(self, state: TrackerState, sensors: Sequence[Sensor]) -> StepResult:
        gamma = self.gamma
        t = state.t + 1
        prior = self.transitions.row(state.p_hat)

        # predict with the transition prior, then design pilots from it
        As, ys = [], []
        for q, m in enumerate(self.models):
            _, Q_pred = predict(state.h_hat[q], state.Q[q], m.covariances, prior, gamma)
            A = self._design(Q_pred, t, q)
            As.append(A)
            ys.append(np.asarray(sensors[q](A)))

        # refine the mixture with the observation-aware posterior
        pi = position_posterior(ys, As, self.models, state.p_hat, self.transitions, self.noise_variance)
        h_new = np.empty_like(state.h_hat)
        Q_new = np.empty_like(state.Q)
        Q_preds = np.empty_like(state.Q)
        for q, m in enumerate(self.models):
            h_pred, Q_pred = predict(state.h_hat[q], state.Q[q], m.covariances, pi, gamma)
            Q_preds[q] = Q_pred
            h_new[q], Q_new[q] = kalman_update(h_pred, Q_pred, ys[q], As[q], self.noise_variance[q])

        p_hat = track_position(list(h_new), list(state.h_hat), self.models, state.p_hat, self.transitions, gamma)

        ld_pred = np.array([_logdet_or_nan(Qp) for Qp in Q_preds])
        ld_post = np.array([_logdet_or_nan(Qn) for Qn in Q_new])
        gap = np.array([entropy_gap(Qp, A, s) for Qp, A, s in zip(Q_preds, As, self.noise_variance)])
        new_state = TrackerState(h_new, Q_new, p_hat, pi, t)
        return StepResult(new_state, As, ys, pi, Q_preds, ld_pred, ld_post, gap)

    def run(
        self,
        sensors_per_step: Callable[[int], Sequence[Sensor]],
        n_steps: int,
        initial_prior: np.ndarray | None = None,
        initial_cell: int | None = None,
    ) -> list[StepResult]:
        """Initialize on slot 0 and step through slots 1..n_steps-1."""
        results = [self.initialize(sensors_per_step(0), initial_prior, initial_cell)]
        for t in range(1, n_steps):
            results.append(self.step(results[-1].state, sensors_per_step(t)))
        return results


def _logdet_or_nan(Q: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(Q)
    return float(val) if np.real(sign) > 0 else float("nan")
