import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmcsi._linalg import logdet
from rmcsi.sensing import (
    adaptive_sensing,
    differential_entropy,
    entropy_gap,
    random_semi_unitary,
    sensing_objective,
)
from rmcsi.tracker import kalman_update

from conftest import random_psd


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(0, 12))
def test_random_rows_orthonormal(seed, N, extra):
    M = 1 + extra % N
    A = random_semi_unitary(M, N, np.random.default_rng(seed))
    assert A.shape == (M, N)
    assert np.linalg.norm(A @ A.conj().T - np.eye(M)) < 1e-10


def test_random_square_is_unitary(rng):
    U = random_semi_unitary(6, 6, rng)
    np.testing.assert_allclose(U.conj().T @ U, np.eye(6), atol=1e-12)


def test_random_rejects_bad_sizes(rng):
    with pytest.raises(ValueError):
        random_semi_unitary(5, 4, rng)
    with pytest.raises(ValueError):
        random_semi_unitary(0, 4, rng)


def test_haar_second_moment(rng):
    M, N, n = 2, 6, 10_000
    acc = np.zeros((N, N), dtype=complex)
    for _ in range(n):
        A = random_semi_unitary(M, N, rng)
        acc += A.conj().T @ A
    acc /= n
    assert np.abs(acc - (M / N) * np.eye(N)).max() < 0.03 * (M / N)


def test_adaptive_on_diagonal():
    A = adaptive_sensing(np.diag([3.0, 2.0, 1.0]).astype(complex), 2)
    np.testing.assert_allclose(np.abs(A), np.eye(3)[:2], atol=1e-12)


def test_adaptive_identity_matches_random_objective(rng):
    Q = np.eye(5, dtype=complex)
    A = adaptive_sensing(Q, 2, rng)
    assert np.linalg.norm(A @ A.conj().T - np.eye(2)) < 1e-10
    B = random_semi_unitary(2, 5, rng)
    assert np.isclose(sensing_objective(Q, A, 0.1), sensing_objective(Q, B, 0.1))


def test_adaptive_randomizes_within_eigenspace():
    Q = np.diag([2.0, 2.0, 1.0]).astype(complex)
    a1 = adaptive_sensing(Q, 1, np.random.default_rng(1))
    a2 = adaptive_sensing(Q, 1, np.random.default_rng(2))
    for a in (a1, a2):
        assert np.isclose(np.linalg.norm(a[0, :2]), 1.0)
        assert abs(a[0, 2]) < 1e-12
    assert not np.allclose(np.abs(a1), np.abs(a2))


def test_adaptive_beats_random_competitors(rng):
    for _ in range(5):
        Q = random_psd(rng, 6)
        A = adaptive_sensing(Q, 2)
        best = sensing_objective(Q, A, 0.2)
        others = [sensing_objective(Q, random_semi_unitary(2, 6, rng), 0.2) for _ in range(1000)]
        assert best >= max(others)
        assert best > np.median(others)


@pytest.mark.parametrize("N", [2, 3])
def test_adaptive_beats_parameter_sweep(rng, N):
    """Single-row designs over a dense grid of unit vectors."""
    Q = random_psd(rng, N)
    best = sensing_objective(Q, adaptive_sensing(Q, 1), 0.5)
    alphas = np.linspace(0, np.pi / 2, 41)
    phis = np.linspace(0, 2 * np.pi, 41)
    if N == 2:
        for a in alphas:
            for p in phis:
                v = np.array([[np.cos(a), np.exp(1j * p) * np.sin(a)]])
                assert best >= sensing_objective(Q, v, 0.5) - 1e-12
    else:
        for a in alphas[::2]:
            for b in alphas[::2]:
                for p1 in phis[::4]:
                    for p2 in phis[::4]:
                        v = np.array(
                            [[np.cos(a), np.exp(1j * p1) * np.sin(a) * np.cos(b), np.exp(1j * p2) * np.sin(a) * np.sin(b)]]
                        )
                        assert best >= sensing_objective(Q, v, 0.5) - 1e-12


def test_entropy_gap_orthogonal_rows_is_zero():
    Q = np.diag([1.0, 2.0, 0.0, 0.0]).astype(complex)
    A = np.eye(4)[2:].astype(complex)
    assert entropy_gap(Q, A, 0.1) == 0.0


def test_entropy_gap_identity_closed_form(rng):
    A = random_semi_unitary(3, 6, rng)
    sig = 0.25
    assert np.isclose(entropy_gap(np.eye(6, dtype=complex), A, sig), -3 * np.log(1 + 1 / sig))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.floats(1e-3, 10.0))
def test_entropy_gap_matches_update(seed, N, sig):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, N + 1))
    Q = random_psd(rng, N)
    A = random_semi_unitary(M, N, rng)
    _, Q_post = kalman_update(np.zeros(N, complex), Q, np.zeros(M, complex), A, sig)
    direct = float(np.real(logdet(Q_post) - logdet(Q)))
    gap = entropy_gap(Q, A, sig)
    assert gap <= 0
    assert abs(direct - gap) < 1e-8
    # entropies differ by half the log-det change
    assert abs(differential_entropy(Q_post) - differential_entropy(Q) - 0.5 * gap) < 1e-8


def test_differential_entropy_formula():
    Q = np.diag([2.0, 0.5, 1.0]).astype(complex)
    expected = 1.5 * (1 + np.log(2 * np.pi)) + 0.5 * np.log(1.0)
    assert np.isclose(differential_entropy(Q), expected)
