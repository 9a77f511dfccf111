"""Sensing matrices: Haar-random semi-unitary draws and entropy-minimizing design."""

from __future__ import annotations

import numpy as np

from ._linalg import complex_normal, hermitian, logdet

EIGEN_GROUP_TOL = 1e-9


def random_semi_unitary(M: int, n_antennas: int, rng: np.random.Generator) -> np.ndarray:
    """M x N matrix with orthonormal rows spanning a Haar-random subspace.

    QR of an i.i.d. complex Gaussian matrix, with the phases of R's diagonal
    folded back into Q so the result is exactly Haar distributed.
    """
    if not 1 <= M <= n_antennas:
        raise ValueError("need 1 <= M <= n_antennas")
    Z = complex_normal(rng, (n_antennas, M))
    Qm, R = np.linalg.qr(Z)
    d = np.diagonal(R)
    Qm = Qm * (d / np.abs(d))
    return Qm.conj().T


def haar_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    return random_semi_unitary(n, n, rng)


def eigen_groups(w: np.ndarray, tol: float) -> list[np.ndarray]:
    """Split descending eigenvalues into runs whose neighbours differ by <= tol."""
    groups, start = [], 0
    for k in range(1, len(w) + 1):
        if k == len(w) or w[k - 1] - w[k] > tol:
            groups.append(np.arange(start, k))
            start = k
    return groups


def adaptive_sensing(
    Q_pred: np.ndarray,
    M: int,
    rng: np.random.Generator | None = None,
    tol: float = EIGEN_GROUP_TOL,
) -> np.ndarray:
    """Rows are the conjugated top-M eigenvectors of ``Q_pred``.

    Eigenvalues within ``tol * ||Q||_2`` of a neighbour form one eigenspace;
    each such eigenspace that reaches the selected set gets a Haar-random
    orthonormal basis, so ties at the cut are broken uniformly.
    """
    N = Q_pred.shape[0]
    if not 1 <= M <= N:
        raise ValueError("need 1 <= M <= n_antennas")
    w, V = np.linalg.eigh(hermitian(Q_pred))
    w, V = w[::-1], V[:, ::-1]
    scale = max(abs(w[0]), abs(w[-1]))
    for g in eigen_groups(w, tol * scale):
        if g.size > 1 and g[0] < M:
            if rng is None:
                rng = np.random.default_rng()
            V[:, g] = V[:, g] @ haar_unitary(g.size, rng)
    return np.ascontiguousarray(V[:, :M].conj().T)


def sensing_objective(Q_pred: np.ndarray, A: np.ndarray, noise_variance: float) -> float:
    """log|I + A Q A^H / sigma^2|, the quantity adaptive sensing maximizes."""
    S = hermitian(A @ Q_pred @ A.conj().T) / noise_variance
    lam = np.clip(np.linalg.eigvalsh(S), 0.0, None)
    return float(np.sum(np.log1p(lam)))


def entropy_gap(Q_pred: np.ndarray, A: np.ndarray, noise_variance: float) -> float:
    """log|Q_t| - log|Q_pred| after a Kalman update, without forming Q_t."""
    return -sensing_objective(Q_pred, A, noise_variance)


def differential_entropy(Q: np.ndarray) -> float:
    """N/2 (1 + log 2 pi) + 1/2 log|Q| (real-Gaussian constant kept as is)."""
    N = Q.shape[0]
    return 0.5 * N * (1.0 + np.log(2 * np.pi)) + 0.5 * float(np.real(logdet(hermitian(Q))))
