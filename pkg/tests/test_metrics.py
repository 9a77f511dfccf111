import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmcsi.metrics import capacity, covariance_errors, efficiency_ratio, localization_error
from rmcsi.scenario import Grid, steering_vector

from conftest import random_psd


def test_capacity_perfect_beam(rng):
    h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    assert np.isclose(capacity(h, h, 0.5), np.log2(1 + np.linalg.norm(h) ** 2 / 0.5))
    assert efficiency_ratio(h, h, 0.5) == 1.0


def test_capacity_orthogonal_and_zero_beam():
    h = np.array([1.0, 0.0], complex)
    e = np.array([0.0, 1.0], complex)
    assert capacity(h, e, 0.1) == 0.0
    assert efficiency_ratio(h, e, 0.1) == 0.0
    assert capacity(h, np.zeros(2, complex), 0.1) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(0, 2 * np.pi))
def test_efficiency_scale_invariant(seed, mag, phase):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    e = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    c = mag * np.exp(1j * phase)
    assert np.isclose(efficiency_ratio(h, c * e, 0.2), efficiency_ratio(h, e, 0.2), rtol=1e-10)
    assert np.isclose(capacity(h, c * h, 0.2), capacity(h, h, 0.2), rtol=1e-12)
    assert 0.0 <= efficiency_ratio(h, e, 0.2) <= 1.0 + 1e-12


def test_covariance_errors_examples(rng):
    C = random_psd(rng, 4, 2)
    assert covariance_errors(C, C) == pytest.approx((0.0, 0.0), abs=1e-10)
    assert covariance_errors(C, 2 * C) == pytest.approx((1.0, 0.0), abs=1e-10)
    a = steering_vector(0.4, 8)
    R1 = np.outer(a, a.conj())
    l2, proj = covariance_errors(R1, 0.01 * np.eye(8))
    assert proj == pytest.approx(0.0, abs=1e-12)
    assert l2 == pytest.approx(1.0, abs=0.01)


def test_covariance_errors_input_checks():
    with pytest.raises(ValueError):
        covariance_errors(np.zeros((2, 2)), np.eye(2))
    with pytest.raises(ValueError):
        covariance_errors(np.eye(2), np.eye(3))


def test_projection_error_against_direct_formula(rng):
    C = random_psd(rng, 5, 2)
    E = rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5))
    P = E @ np.linalg.inv(E.conj().T @ E) @ E.conj().T
    _, proj = covariance_errors(C, E)
    assert np.isclose(proj, np.linalg.norm(C - P @ C) / np.linalg.norm(C))


def test_localization_error():
    g = Grid(2, 2, 5.0)
    np.testing.assert_allclose(localization_error(g.centers, [0, 1, 3], [0, 0, 0]), [0, 5, np.sqrt(50)])
