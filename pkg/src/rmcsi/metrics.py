"""Evaluation metrics for channel tracking and map construction."""

from __future__ import annotations

import numpy as np


def capacity(h_true: np.ndarray, h_est: np.ndarray, noise_variance: float) -> float:
    """log2(1 + |b^H h|^2 / sigma^2) with the MRC beam b = h_est / ||h_est||."""
    norm = np.linalg.norm(h_est)
    if norm == 0:
        return 0.0
    gain = abs(np.vdot(h_est / norm, h_true)) ** 2
    return float(np.log2(1.0 + gain / noise_variance))


def efficiency_ratio(h_true: np.ndarray, h_est: np.ndarray, noise_variance: float) -> float:
    """Capacity with the estimated beam relative to the perfect-CSI beam."""
    best = capacity(h_true, h_true, noise_variance)
    if best == 0:
        return 1.0
    return capacity(h_true, h_est, noise_variance) / best


def covariance_errors(C_true: np.ndarray, C_est: np.ndarray) -> tuple[float, float]:
    """(||C_est - C||_2 / ||C||_2, ||C - P C||_F / ||C||_F) with P the projector onto range(C_est)."""
    if C_true.shape != C_est.shape:
        raise ValueError("covariances must have the same shape")
    ref = np.linalg.norm(C_true, 2)
    if ref == 0:
        raise ValueError("true covariance is zero")
    l2 = np.linalg.norm(C_est - C_true, 2) / ref
    P = C_est @ np.linalg.pinv(C_est)
    proj = np.linalg.norm(C_true - P @ C_true) / np.linalg.norm(C_true)
    return float(l2), float(proj)


def localization_error(centers: np.ndarray, true_cells, est_cells) -> np.ndarray:
    """Euclidean distance in metres between true and estimated cell centers."""
    d = centers[np.asarray(true_cells)] - centers[np.asarray(est_cells)]
    return np.linalg.norm(d, axis=-1)
