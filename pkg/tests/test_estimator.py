import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ionolink.errors import ConfigError
from ionolink.estimator import (
    PRIOR_STD,
    FilterState,
    KalmanFilter,
    NoiseConfig,
    confidence_band,
    horizon_process_cov,
    kf_init,
    kf_step,
    propagate_horizon,
    transition,
)

K = 0.0154


def test_init_defaults():
    s = kf_init()
    assert np.all(s.x_hat == 0)
    np.testing.assert_array_equal(np.diag(s.P), PRIOR_STD**2)
    assert confidence_band(kf_init(prior_var_scale=4.0)) == pytest.approx(2 * confidence_band(s))
    with pytest.raises(ConfigError):
        kf_init(prior_var_scale=-1.0)


def test_band_formula():
    P = np.zeros((4, 4))
    P[0, 0] = 1.0
    assert confidence_band(FilterState(np.zeros(4), P)) == pytest.approx(1.96)
    assert confidence_band(FilterState(np.zeros(4), np.zeros((4, 4)))) == 0.0


def test_noiseless_matches_batch_posterior():
    # with no process noise every y_j observes the initial state through h F^j,
    # so the filter covariance is the batch posterior mapped forward by F^k
    noise = NoiseConfig(q1=1e-30, q2=1e-30, q3=1e-30, q4=1e-30)
    s0 = kf_init()
    kf = KalmanFilter(s0, 0.1, K, noise)
    info = np.linalg.inv(s0.P)
    Fk = np.eye(4)
    back = []
    for _ in range(200):
        kf.step(0.01)
        Fk = kf.F @ Fk
        row = kf.h @ Fk
        info = info + np.outer(row, row) / noise.r_var
        expect = Fk @ np.linalg.inv(info) @ Fk.T
        np.testing.assert_allclose(kf.P, expect, rtol=1e-6, atol=1e-12)
        Fi = np.linalg.inv(Fk)
        back.append(Fi @ kf.P @ Fi.T)
    # referred back to the initial state, uncertainty never grows
    for a, b in zip(back, back[1:]):
        assert np.linalg.eigvalsh(a - b).min() >= -1e-12


def test_unobservable_when_gain_zero():
    s = kf_init(prior_dvtec=2.0)
    s.P[0, 2] = s.P[2, 0] = 0.0
    out = kf_step(s, 0.3, 0.1, 0.0, NoiseConfig())
    assert out.x_hat[0] == pytest.approx(2.0)
    assert out.x_hat[1] == pytest.approx(0.0)


def test_step_is_pure():
    s = kf_init()
    before = s.P.copy()
    kf_step(s, 0.01, 0.1, K, NoiseConfig())
    np.testing.assert_array_equal(s.P, before)


def test_horizon_extrapolation():
    s = kf_init()
    s.x_hat[:] = [1.0, 0.01, 0.0, 0.0]
    mu, _ = propagate_horizon(s, 60.0, 0.1, NoiseConfig())
    assert mu[0] == pytest.approx(1.6)
    assert mu[1] == pytest.approx(0.01)


def test_horizon_without_process_noise():
    noise = NoiseConfig(q1=1e-300, q2=1e-300)
    s = kf_init()
    FH = np.array([[1.0, 60.0], [0.0, 1.0]])
    _, P = propagate_horizon(s, 60.0, 0.1, noise)
    np.testing.assert_allclose(P, FH @ s.P[:2, :2] @ FH.T, rtol=1e-12)


def test_horizon_matches_sequential_predicts():
    noise = NoiseConfig()
    s = kf_init()
    s.x_hat[:] = [0.5, 0.002, 0.1, 0.0]
    F = transition(0.1)
    Qd = np.diag(noise.q_diag * 0.1)
    x, P = s.x_hat.copy(), s.P.copy()
    for _ in range(600):
        x = F @ x
        P = F @ P @ F.T + Qd
    mu, Pxx = propagate_horizon(s, 60.0, 0.1, noise)
    np.testing.assert_allclose(mu, x[:2], rtol=1e-12)
    np.testing.assert_allclose(Pxx, P[:2, :2], rtol=1e-9)


def test_process_cov_continuous_limit():
    noise = NoiseConfig()
    H = 60.0
    exact = horizon_process_cov(H, 1e-3, noise)
    q1, q2 = noise.q1, noise.q2
    cont = np.array([[q1 * H + q2 * H**3 / 3, q2 * H**2 / 2], [q2 * H**2 / 2, q2 * H]])
    np.testing.assert_allclose(exact, cont, rtol=1e-3)


def _self_consistent(n_runs, n_steps, seed, noise, dt=0.1, k=K):
    """Batched truth/measurement simulation from the filter's own model."""
    rng = np.random.default_rng(seed)
    s0 = kf_init()
    F = transition(dt)
    sq = np.sqrt(noise.q_diag * dt)
    x = rng.normal(size=(4, n_runs)) * np.sqrt(np.diag(s0.P))[:, None]
    kf = KalmanFilter(FilterState(np.zeros((4, n_runs)), s0.P.copy()), dt, k, noise)
    h = np.array([k, 0.0, 1.0, 0.0])
    nis, inside = [], []
    for _ in range(n_steps):
        x = F @ x + sq[:, None] * rng.normal(size=(4, n_runs))
        y = h @ x + np.sqrt(noise.r_var) * rng.normal(size=n_runs)
        kf.step(y)
        nis.append(kf.nis)
        inside.append(np.abs(kf.x[0] - x[0]) <= 1.96 * np.sqrt(kf.P[0, 0]))
    return np.concatenate(nis), np.concatenate(inside)


def test_nis_and_coverage_small():
    nis, inside = _self_consistent(2000, 20, 1, NoiseConfig())
    # chi^2(1) mean 1, std sqrt(2/N)
    assert abs(nis.mean() - 1.0) < 3 * np.sqrt(2 / len(nis)) + 1e-3
    assert inside.mean() == pytest.approx(0.95, abs=0.01)


def test_covariance_symmetric_psd_long_run():
    kf = KalmanFilter(kf_init(), 0.1, K, NoiseConfig())
    rng = np.random.default_rng(9)
    for y in rng.normal(0, 0.008, 5000):
        kf.step(y)
        assert np.max(np.abs(kf.P - kf.P.T)) < 1e-12
    assert np.min(np.linalg.eigvalsh(kf.P)) > -1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(1.0, 600.0), st.floats(-0.1, 0.1))
def test_horizon_mean_linear(H, rate):
    s = kf_init()
    s.x_hat[1] = rate
    mu, P = propagate_horizon(s, H, 0.1, NoiseConfig())
    assert mu[0] == pytest.approx(rate * H, abs=1e-12)
    assert np.all(np.linalg.eigvalsh(P) > 0)
