"""Small complex linear-algebra helpers shared across the package."""

from __future__ import annotations

import warnings

import numpy as np


class NumericalFallbackWarning(RuntimeWarning):
    """Emitted whenever a numerical safeguard replaces the nominal computation.

    The CLI turns these into errors under ``--strict``.
    """


def flag(message: str) -> None:
    warnings.warn(message, NumericalFallbackWarning, stacklevel=3)


def hermitian(X: np.ndarray) -> np.ndarray:
    """Return the Hermitian part (X + X^H)/2; works on stacks of matrices."""
    return 0.5 * (X + np.conj(np.swapaxes(X, -1, -2)))


def psd_project(X: np.ndarray) -> np.ndarray:
    """Nearest Hermitian PSD matrix in Frobenius norm (eigenvalue clipping at 0)."""
    w, V = np.linalg.eigh(hermitian(X))
    w = np.clip(w, 0.0, None)
    out = (V * w[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))
    return hermitian(out)


def psd_sqrt(C: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Hermitian square root of a PSD matrix (or stack).

    Eigenvalues down to ``-tol * max(1, |lambda|_max)`` are clipped to zero;
    anything more negative means the input is not PSD and raises.
    """
    w, V = np.linalg.eigh(hermitian(C))
    scale = np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True))
    if np.any(w < -tol * scale):
        raise ValueError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    w = np.sqrt(np.clip(w, 0.0, None))
    return (V * w[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def complex_normal(rng: np.random.Generator, size) -> np.ndarray:
    """i.i.d. CN(0, 1) samples."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def logdet(X: np.ndarray) -> np.ndarray:
    """log|X| for Hermitian positive-definite X (or a stack)."""
    sign, val = np.linalg.slogdet(X)
    if np.any(np.real(sign) <= 0):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return val


def is_semi_unitary(A: np.ndarray, atol: float = 1e-10) -> bool:
    A = np.atleast_2d(A)
    M = A.shape[0]
    return bool(np.linalg.norm(A @ A.conj().T - np.eye(M)) < atol)


def check_semi_unitary(A: np.ndarray, atol: float = 1e-10) -> None:
    if not is_semi_unitary(A, atol):
        raise ValueError("sensing matrix must satisfy A A^H = I")
