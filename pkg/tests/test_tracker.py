import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmcsi._linalg import NumericalFallbackWarning, logdet
from rmcsi.radiomap import RadioMap
from rmcsi.scenario import Grid, MobilityModel, Scenario, TransitionModel, steering_vector
from rmcsi.sensing import adaptive_sensing, random_semi_unitary
from rmcsi.tracker import (
    MapModel,
    SwitchingKalmanTracker,
    kalman_gain,
    kalman_update,
    observation_loglik,
    position_posterior,
    predict,
    track_position,
)

from conftest import random_psd, small_config


def _line(n_cells, reach_cells=2, **kw):
    grid = Grid(1, n_cells, 5.0)
    mob = MobilityModel(max_speed=reach_cells * 5.0 / 0.5, slot_duration=0.5, **kw)
    return grid, TransitionModel(grid, mob)


def _map(grid, covs):
    return RadioMap(grid, np.asarray(covs, dtype=complex))


def _cn_logpdf(x, S):
    """Full complex-Gaussian log-density, constants included."""
    n = len(x)
    return float(-np.real(x.conj() @ np.linalg.solve(S, x)) - np.real(logdet(S)) - n * np.log(np.pi))


# -- position posterior ---------------------------------------------------------


def test_posterior_point_mass_with_one_reachable_cell(rng):
    grid = Grid(1, 3, 5.0)
    trans = TransitionModel(grid, MobilityModel(max_speed=1.0))
    m = _map(grid, [random_psd(rng, 3) for _ in range(3)])
    A = random_semi_unitary(1, 3, rng)
    pi = position_posterior(rng.standard_normal(1) + 0j, A, m, 1, trans, 0.1)
    np.testing.assert_array_equal(pi, [0.0, 1.0, 0.0])


def test_posterior_equals_prior_for_identical_maps(rng):
    grid, trans = _line(4)
    C = random_psd(rng, 4)
    m = _map(grid, [C] * 4)
    A = random_semi_unitary(2, 4, rng)
    pi = position_posterior(rng.standard_normal(2) + 1j, A, m, 1, trans, 0.3)
    np.testing.assert_allclose(pi, trans.row(1), atol=1e-14)
    assert np.isclose(pi.sum(), 1.0)


def test_posterior_picks_aligned_cell():
    N = 8
    grid, trans = _line(3)
    thetas = [-0.6, 0.1, 0.8]
    covs = [np.outer(steering_vector(t, N), steering_vector(t, N).conj()) for t in thetas]
    m = _map(grid, covs)
    A = (steering_vector(thetas[1], N).conj() / np.sqrt(N))[None]
    y = A @ (1.3 * steering_vector(thetas[1], N))
    pi = position_posterior(y, A, m, 0, trans, 1e-6)
    assert int(np.argmax(pi)) == 1


def test_posterior_matches_direct_bayes(rng):
    grid, trans = _line(5)
    covs = [random_psd(rng, 4, 2) for _ in range(5)]
    m = _map(grid, covs)
    A = random_semi_unitary(2, 4, rng)
    y = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    prior = trans.row(2)
    like = np.array([np.exp(_cn_logpdf(y, A @ C @ A.conj().T + 0.2 * np.eye(2))) for C in covs])
    direct = like * prior / np.sum(like * prior)
    np.testing.assert_allclose(position_posterior(y, A, m, 2, trans, 0.2), direct, rtol=1e-10)


def test_posterior_two_stations_multiply(rng):
    grid, trans = _line(4)
    maps = [_map(grid, [random_psd(rng, 3) for _ in range(4)]) for _ in range(2)]
    As = [random_semi_unitary(1, 3, rng) for _ in range(2)]
    ys = [rng.standard_normal(1) + 0j for _ in range(2)]
    fused = position_posterior(ys, As, maps, 1, trans, [0.1, 0.2])
    prior = trans.row(1)
    l1 = position_posterior(ys[0], As[0], maps[0], 1, trans, 0.1) / np.where(prior > 0, prior, 1)
    l2 = position_posterior(ys[1], As[1], maps[1], 1, trans, 0.2) / np.where(prior > 0, prior, 1)
    direct = prior * l1 * l2
    np.testing.assert_allclose(fused, direct / direct.sum(), rtol=1e-10)


def test_posterior_underflow_falls_back_to_prior(rng):
    grid, trans = _line(3)
    m = _map(grid, [random_psd(rng, 3) for _ in range(3)])
    A = random_semi_unitary(1, 3, rng)
    with pytest.warns(NumericalFallbackWarning):
        pi = position_posterior(np.array([np.nan + 0j]), A, m, 1, trans, 0.1)
    np.testing.assert_allclose(pi, trans.row(1))


def test_posterior_initial_prior(rng):
    grid, trans = _line(3)
    C = random_psd(rng, 3)
    m = _map(grid, [C] * 3)
    A = random_semi_unitary(1, 3, rng)
    y = np.array([0.5 + 0j])
    np.testing.assert_allclose(position_posterior(y, A, m, None, trans, 0.1), np.full(3, 1 / 3))
    pi = position_posterior(y, A, m, None, trans, 0.1, initial_prior=[0, 1, 3])
    np.testing.assert_allclose(pi, [0, 0.25, 0.75])
    with pytest.raises(ValueError):
        position_posterior(y, A, m, None, trans, 0.1, initial_prior=[0, 0, 0])


# -- prediction and update --------------------------------------------------------


def test_predict_frozen(rng):
    h = rng.standard_normal(3) + 0j
    Q = random_psd(rng, 3)
    covs = np.stack([random_psd(rng, 3) for _ in range(2)])
    hp, Qp = predict(h, Q, covs, np.array([0.5, 0.5]), 1.0)
    np.testing.assert_array_equal(hp, h)
    np.testing.assert_allclose(Qp, Q, atol=1e-15)


def test_predict_memoryless_single_cell(rng):
    covs = np.stack([random_psd(rng, 3) for _ in range(3)])
    _, Qp = predict(np.ones(3, complex), random_psd(rng, 3), covs, np.array([0.0, 1.0, 0.0]), 0.0)
    np.testing.assert_allclose(Qp, covs[1], atol=1e-15)


def test_predict_two_cell_mixture(rng):
    Q = random_psd(rng, 3)
    C1, C2 = random_psd(rng, 3), random_psd(rng, 3)
    g = 0.7
    _, Qp = predict(np.zeros(3, complex), Q, np.stack([C1, C2]), np.array([0.5, 0.5]), g)
    np.testing.assert_allclose(Qp, g**2 * Q + (1 - g**2) * (C1 + C2) / 2, atol=1e-14)


def test_gain_identity_prior(rng):
    A = random_semi_unitary(2, 5, rng)
    K = kalman_gain(np.eye(5, dtype=complex), A, 0.4)
    np.testing.assert_allclose(K, A.conj().T / 1.4, atol=1e-14)


def test_update_exact_observation(rng):
    h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    hh, Q = kalman_update(np.zeros(4, complex), random_psd(rng, 4), h, np.eye(4, dtype=complex), 0.0)
    np.testing.assert_allclose(hh, h, atol=1e-10)
    np.testing.assert_allclose(Q, 0, atol=1e-10)


def test_singular_innovation_is_loaded_and_flagged():
    Q = np.diag([1.0, 0.0]).astype(complex)
    A = np.array([[0.0, 1.0]], dtype=complex)
    with pytest.warns(NumericalFallbackWarning):
        h, Qn = kalman_update(np.zeros(2, complex), Q, np.zeros(1, complex), A, 0.0)
    assert np.all(np.isfinite(h)) and np.all(np.isfinite(Qn))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 8, 16]), st.floats(1e-2, 5.0))
def test_information_form_identity(seed, N, sig):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, N + 1))
    Qp = random_psd(rng, N)
    A = random_semi_unitary(M, N, rng)
    _, Q = kalman_update(np.zeros(N, complex), Qp, np.zeros(M, complex), A, sig)
    E = Q @ (np.linalg.inv(Qp) + A.conj().T @ A / sig) - np.eye(N)
    assert np.linalg.norm(E) < 1e-8
    np.testing.assert_allclose(Q, Q.conj().T, atol=1e-14)


# -- position tracking --------------------------------------------------------------


def test_track_single_reachable_cell(rng):
    grid = Grid(1, 3, 5.0)
    trans = TransitionModel(grid, MobilityModel(max_speed=1.0))
    m = _map(grid, [random_psd(rng, 3) for _ in range(3)])
    h = rng.standard_normal(3) + 0j
    assert track_position(h, h, m, 2, trans, 0.5) == 2


def test_track_prefers_subspace_cell():
    N = 6
    grid, trans = _line(2)
    a = steering_vector(0.0, N)
    b = steering_vector(np.arcsin(2 / N), N)  # orthogonal to a
    m = RadioMap(grid, np.stack([np.outer(a, a.conj()), np.outer(b, b.conj())]), moving_power=1e-3)
    g = 0.5
    prev = np.zeros(N, complex)
    assert track_position(0.8 * a, prev, m, 0, trans, g) == 0
    assert track_position(0.8 * b, prev, m, 0, trans, g) == 1


def test_track_frozen_channel_uses_prior(rng):
    grid, trans = _line(5, reach_cells=1, mean_velocity=(10.0, 0.0), length_scale=3.0)
    m = _map(grid, [random_psd(rng, 3) for _ in range(5)])
    h = rng.standard_normal(3) + 0j
    assert track_position(h, h, m, 2, trans, 1.0) == int(np.argmax(trans.row(2)))


def test_track_ties_go_to_lowest_index(rng):
    grid, trans = _line(5)
    C = random_psd(rng, 3)
    m = _map(grid, [C] * 5)
    h = rng.standard_normal(3) + 0j
    # symmetric prior around cell 2 and identical maps: cells 1 and 3 tie, 2 wins
    assert track_position(h, 0.5 * h, m, 2, trans, 0.3) == 2
    grid2 = Grid(1, 2, 5.0)
    trans2 = TransitionModel(grid2, MobilityModel(mean_velocity=(5.0, 0.0), max_speed=20.0, length_scale=3.0))
    m2 = _map(grid2, [C, C])
    assert trans2.probability(0, 0) == trans2.probability(0, 1)
    assert track_position(h, 0.5 * h, m2, 0, trans2, 0.3) == 0


def test_track_two_identical_stations_match_one(rng):
    grid, trans = _line(6)
    m = _map(grid, [random_psd(rng, 4, 2) for _ in range(6)])
    for _ in range(20):
        h, hp = rng.standard_normal(4) + 1j, rng.standard_normal(4) + 0j
        one = track_position(h, hp, m, 3, trans, 0.6)
        two = track_position([h, h], [hp, hp], [m, m], 3, trans, 0.6)
        assert one == two


# -- full filter ----------------------------------------------------------------


def _textbook_kf(h0, P0, ys, As, C, gamma, sig):
    """Plain covariance-form Kalman filter for h_t = g h_{t-1} + w_t, y_t = A_t h_t + n_t."""
    x, P = h0.copy(), P0.copy()
    W = (1 - gamma**2) * C
    out = []
    for y, A in zip(ys, As):
        x = gamma * x
        P = gamma**2 * P + W
        S = A @ P @ A.conj().T + sig * np.eye(A.shape[0])
        K = P @ A.conj().T @ np.linalg.inv(S)
        x = x + K @ (y - A @ x)
        P = (np.eye(len(x)) - K @ A) @ P
        out.append((x.copy(), P.copy()))
    return out


def _single_cell_run(n_steps, N=4, M=1, gamma=0.8, sig=0.05, seed=0):
    rng = np.random.default_rng(seed)
    C = random_psd(rng, N, 2) + 0.01 * np.eye(N)
    grid = Grid(1, 1)
    trans = TransitionModel(grid, MobilityModel())
    m = _map(grid, [C])
    H = rng.standard_normal((n_steps, N)) + 1j * rng.standard_normal((n_steps, N))
    noise = 0.2 * (rng.standard_normal((n_steps, M)) + 1j * rng.standard_normal((n_steps, M)))
    tracker = SwitchingKalmanTracker(m, trans, gamma, sig, M, "random", rng=1)
    steps = tracker.run(lambda t: [lambda A, t=t: A @ H[t] + noise[t]], n_steps)
    return steps, C


def test_single_cell_equals_textbook_kf():
    gamma, sig = 0.8, 0.05
    steps, C = _single_cell_run(200, gamma=gamma, sig=sig)
    first = steps[0].state
    np.testing.assert_allclose(first.Q[0], (1 - gamma**2) * C, atol=1e-14)
    ref = _textbook_kf(first.h_hat[0], first.Q[0], [s.y[0] for s in steps[1:]], [s.A[0] for s in steps[1:]], C, gamma, sig)
    for s, (x, P) in zip(steps[1:], ref):
        assert s.state.p_hat == 0
        np.testing.assert_allclose(s.state.h_hat[0], x, atol=1e-10, rtol=0)
        np.testing.assert_allclose(s.state.Q[0], P, atol=1e-10, rtol=0)


def test_step_matches_hand_composition():
    sc = Scenario.from_config(small_config(n_bs=2))
    maps = [RadioMap(sc.grid, sc.covariances(q)) for q in range(2)]
    sig = [sc.noise_variance(q) for q in range(2)]
    traj = sc.simulate(30, seed=2)
    noise = np.random.default_rng(3).standard_normal((30, 2, 2)) * 0.05 + 0j

    def rule(Q, t, q):
        return adaptive_sensing(Q, 2)

    def sensors(t):
        return [lambda A, t=t, q=q: A @ traj.channels[t, q] + noise[t, q] for q in range(2)]

    tracker = SwitchingKalmanTracker(maps, sc.transitions, sc.gamma, sig, 2, rule, rng=0)
    res = tracker.run(sensors, 30, initial_cell=int(traj.cells[0]))
    models = [MapModel(m) for m in maps]
    for t in range(1, 30):
        prev = res[t - 1].state
        prior = sc.transitions.row(prev.p_hat)
        As, ys = [], []
        for q in range(2):
            _, Qp = predict(prev.h_hat[q], prev.Q[q], models[q].covariances, prior, sc.gamma)
            As.append(adaptive_sensing(Qp, 2))
            ys.append(sensors(t)[q](As[-1]))
        pi = position_posterior(ys, As, models, prev.p_hat, sc.transitions, sig)
        hs, Qs = [], []
        for q in range(2):
            hp, Qp = predict(prev.h_hat[q], prev.Q[q], models[q].covariances, pi, sc.gamma)
            h, Q = kalman_update(hp, Qp, ys[q], As[q], sig[q])
            hs.append(h)
            Qs.append(Q)
        p = track_position(hs, list(prev.h_hat), models, prev.p_hat, sc.transitions, sc.gamma)
        cur = res[t].state
        np.testing.assert_array_equal(cur.pi, pi)
        np.testing.assert_array_equal(cur.h_hat, np.stack(hs))
        np.testing.assert_array_equal(cur.Q, np.stack(Qs))
        assert cur.p_hat == p
        for q in range(2):
            np.testing.assert_array_equal(res[t].A[q], As[q])


def test_entropy_never_increases_over_run():
    sc = Scenario.from_config(small_config())
    maps = [RadioMap(sc.grid, sc.covariances(0))]
    traj = sc.simulate(80, seed=1)
    sig = sc.noise_variance(0)
    rng = np.random.default_rng(0)
    tracker = SwitchingKalmanTracker(maps, sc.transitions, sc.gamma, sig, 1, "adaptive", rng=rng)
    res = tracker.run(lambda t: [lambda A, t=t: A @ traj.channels[t, 0] + 0.01 * A[:, 0]], 80, initial_cell=int(traj.cells[0]))
    for r in res[1:]:
        assert np.all(r.logdet_post <= r.logdet_pred + 1e-9)
        np.testing.assert_allclose(r.logdet_post - r.logdet_pred, r.entropy_gap, atol=1e-8)
        assert np.isclose(r.pi.sum(), 1.0)
        np.testing.assert_allclose(r.state.Q[0], r.state.Q[0].conj().T, atol=1e-14)


def test_tracker_validation(rng):
    grid, trans = _line(3)
    m = _map(grid, [random_psd(rng, 3) for _ in range(3)])
    with pytest.raises(ValueError):
        SwitchingKalmanTracker(m, trans, 1.5, 0.1)
    with pytest.raises(ValueError):
        SwitchingKalmanTracker(m, trans, 0.5, [0.1, 0.2])
    with pytest.raises(ValueError):
        SwitchingKalmanTracker(m, trans, 0.5, 0.1, n_pilots=4)
    with pytest.raises(ValueError):
        SwitchingKalmanTracker(m, TransitionModel(Grid(2, 2), MobilityModel()), 0.5, 0.1)


# -- joint-density factorization ------------------------------------------------------


def _joint_direct(cells, H, Y, As, covs, trans, gamma, sig):
    """log p(Y, H, P) from one joint Gaussian over the stacked channels and
    observations given the path, plus the Markov chain's path probability."""
    T, N = H.shape
    s2 = 1 - gamma**2
    B = np.zeros((T * N, T * N), dtype=complex)
    for t in range(T):
        for k in range(t + 1):
            B[t * N : (t + 1) * N, k * N : (k + 1) * N] = gamma ** (t - k) * np.eye(N)
    V = np.zeros((T * N, T * N), dtype=complex)
    V[:N, :N] = covs[cells[0]]
    for t in range(1, T):
        V[t * N : (t + 1) * N, t * N : (t + 1) * N] = s2 * covs[cells[t]]
    SH = B @ V @ B.conj().T
    Abar = np.zeros((sum(A.shape[0] for A in As), T * N), dtype=complex)
    r = 0
    for t, A in enumerate(As):
        Abar[r : r + A.shape[0], t * N : (t + 1) * N] = A
        r += A.shape[0]
    J = np.vstack([np.eye(T * N), Abar])
    S = J @ SH @ J.conj().T
    S[T * N :, T * N :] += sig * np.eye(r)
    z = np.concatenate([H.ravel(), np.concatenate(Y)])
    logp_path = np.log(1 / trans.grid.n_cells) + sum(np.log(trans.probability(a, b)) for a, b in zip(cells[:-1], cells[1:]))
    return _cn_logpdf(z, S) + logp_path


def _joint_factorized(cells, H, Y, As, covs, trans, gamma, sig):
    """Sum of the per-slot factors: observation, channel transition, initial
    channel and mobility terms."""
    T, N = H.shape
    s2 = 1 - gamma**2
    obs = sum(_cn_logpdf(Y[t] - As[t] @ H[t], sig * np.eye(As[t].shape[0])) for t in range(T))
    chan = sum(_cn_logpdf(H[t] - gamma * H[t - 1], s2 * covs[cells[t]]) for t in range(1, T))
    first = _cn_logpdf(H[0], covs[cells[0]])
    mob = sum(np.log(trans.probability(a, b)) for a, b in zip(cells[:-1], cells[1:])) + np.log(1 / trans.grid.n_cells)
    return obs + chan + first + mob


@pytest.mark.parametrize("seed", range(5))
def test_joint_density_factorizes(seed):
    cfg = small_config(n_rows=1, n_cols=3, n_antennas=3, gamma=0.6, max_speed=20.0)
    sc = Scenario.from_config(cfg)
    covs = sc.covariances(0)
    sig = 0.3
    rng = np.random.default_rng(seed)
    T = 4
    traj = sc.simulate(T, seed=seed)
    As = [random_semi_unitary(int(rng.integers(1, 3)), 3, rng) for _ in range(T)]
    Y = [A @ h + np.sqrt(sig / 2) * (rng.standard_normal(A.shape[0]) + 1j * rng.standard_normal(A.shape[0])) for A, h in zip(As, traj.channels[:, 0])]
    args = (traj.cells, traj.channels[:, 0], Y, As, covs, sc.transitions, sc.gamma, sig)
    assert np.isclose(_joint_direct(*args), _joint_factorized(*args), rtol=1e-9, atol=1e-9)


def test_observation_loglik_matches_full_density(rng):
    covs = np.stack([random_psd(rng, 4) for _ in range(3)])
    A = random_semi_unitary(2, 4, rng)
    y = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    ll = observation_loglik(y, A, covs, 0.2)
    full = [_cn_logpdf(y, A @ C @ A.conj().T + 0.2 * np.eye(2)) + 2 * np.log(np.pi) for C in covs]
    np.testing.assert_allclose(ll, full, rtol=1e-12)
