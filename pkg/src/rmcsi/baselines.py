"""Reference channel estimators that ignore the radio map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve_toeplitz

from ._linalg import flag
from .tracker import kalman_update


@dataclass(frozen=True)
class BaselineConfig:
    kind: str  # "kf", "ls" or "ar"
    n_pilots: int | None = None  # None picks the per-method default
    ar_order: int = 1
    history: int = 10

    def __post_init__(self):
        if self.kind not in ("kf", "ls", "ar"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.ar_order < 1 or self.history < self.ar_order + 1:
            raise ValueError("AR history must be at least order + 1")

    def pilots(self, n_antennas: int) -> int:
        if self.n_pilots is not None:
            return self.n_pilots
        return {"kf": 1, "ls": n_antennas // 2, "ar": n_antennas}[self.kind]


def kf_process_covariance(covariances: np.ndarray, gamma: float) -> np.ndarray:
    """(1 - gamma^2) (tr Cbar / N) I with Cbar the mean covariance over cells."""
    N = covariances.shape[-1]
    level = float(np.mean(np.real(np.trace(covariances, axis1=-2, axis2=-1)))) / N
    return (1.0 - gamma**2) * level * np.eye(N)


def kf_step(
    h_hat: np.ndarray,
    Q: np.ndarray,
    y: np.ndarray,
    A: np.ndarray,
    noise_variance: float,
    gamma: float,
    Q_process: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict with a fixed process covariance, then the usual update."""
    h_pred = gamma * h_hat
    Q_pred = gamma**2 * Q + Q_process
    return kalman_update(h_pred, Q_pred, y, A, noise_variance)


def ls_estimate(y: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution A^+ y."""
    A = np.atleast_2d(A)
    if not np.any(A):
        raise ValueError("sensing matrix is zero")
    return np.linalg.pinv(A) @ y


def autocovariance(x: np.ndarray, max_lag: int) -> np.ndarray:
    """r(k) = mean over t of x[t + k] conj(x[t]), k = 0..max_lag (divide by L - k)."""
    L = len(x)
    return np.array([np.vdot(x[: L - k], x[k:]) / (L - k) for k in range(max_lag + 1)])


def yule_walker(x: np.ndarray, order: int) -> np.ndarray:
    """Complex AR coefficients a with x[t] ~ sum_i a[i] x[t - 1 - i]."""
    r = autocovariance(x, order)
    col, row = r[:order], np.conj(r[:order])
    try:
        if abs(r[0]) == 0:
            raise LinAlgError("zero-energy history")
        a = solve_toeplitz((col, row), r[1 : order + 1])
        if not np.all(np.isfinite(a)):
            raise LinAlgError("non-finite solution")
    except (LinAlgError, np.linalg.LinAlgError):
        flag("singular Yule-Walker system; diagonal load 1e-9")
        col = col.copy()
        col[0] += 1e-9
        row = np.conj(col)
        a = solve_toeplitz((col, row), r[1 : order + 1])
    return a


def ar_predict(history: np.ndarray, order: int = 1) -> np.ndarray:
    """One-step prediction per antenna from past estimates (oldest first, shape (L, N))."""
    history = np.asarray(history)
    scalar = history.ndim == 1
    if scalar:
        history = history[:, None]
    L, N = history.shape
    if L < order + 1:
        raise ValueError("history length must be >= order + 1")
    out = np.empty(N, dtype=complex)
    for n in range(N):
        x = history[:, n]
        a = yule_walker(x, order)
        out[n] = np.dot(a, x[::-1][:order])
    return out[0] if scalar else out
