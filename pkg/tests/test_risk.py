import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ionolink.errors import AlreadyFrozen, FrozenProtocolError, NoBracket
from ionolink.risk import (
    MarginModel,
    calibrate_offset_c,
    endpoint_outage,
    endpoint_outage_array,
    required_margin_forecast,
    uncertainty_penalty,
    window_outage,
)

ZERO_P = np.zeros((2, 2))


def test_penalty_zero_variance():
    assert uncertainty_penalty(0.0, 0.0154, MarginModel()) == 0.0


def test_penalty_scalar_value():
    kappa = 10 ** 1.3
    expected = 10 * math.log10(1 + kappa * 0.0154**2)
    got = uncertainty_penalty(1.0, 0.0154, MarginModel())
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.0206, abs=1e-4)


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_penalty_monotone(a, b):
    lo, hi = sorted((a, b))
    m = MarginModel()
    assert uncertainty_penalty(lo, 0.02, m) <= uncertainty_penalty(hi, 0.02, m)


def test_penalty_rejects_negative_variance():
    with pytest.raises(ValueError):
        uncertainty_penalty(-1.0, 0.02, MarginModel())


def test_forecast_zero_state():
    mean, std = required_margin_forecast([0.0, 0.0], ZERO_P, 0.0154, None, MarginModel())
    assert mean == pytest.approx(3.2)
    assert std == 0.0


def test_forecast_unit_excursion():
    mean, _ = required_margin_forecast([1.0, 0.0], ZERO_P, 0.0154, None, MarginModel())
    assert mean == pytest.approx(4.4)


def test_negative_excursion_rectified():
    P = np.array([[0.5, 0.0], [0.0, 0.0]])
    mean, std = required_margin_forecast([-1.0, 0.0], P, 0.0154, 0.0, MarginModel())
    assert mean == pytest.approx(3.2)
    assert std == 0.0  # g1 = 0 below zero, g2 = 0 at zero rate


def test_forecast_gradient_variance():
    m = MarginModel()
    P = np.array([[0.04, 1e-4], [1e-4, 1e-6]])
    _, std = required_margin_forecast([2.0, -0.01], P, 0.0154, 0.0, m)
    g = np.array([m.k1, -m.k2])
    assert std == pytest.approx(math.sqrt(g @ P @ g), rel=1e-12)


def test_outage_at_zero_argument():
    assert endpoint_outage(7.0, 1.3, 7.0, MarginModel()) == pytest.approx(0.5)


def test_outage_normal_quantile():
    m = MarginModel()
    p = endpoint_outage(7.0 + 1.645 * 2.0, 2.0, 7.0, m)
    assert p == pytest.approx(norm.cdf(1.645), abs=1e-12)
    assert p == pytest.approx(0.95, abs=1e-3)


def test_outage_zero_sigma_limit():
    m = MarginModel()
    assert endpoint_outage(5.0, 0.0, 7.0, m) == 0.0
    assert endpoint_outage(9.0, 0.0, 7.0, m) == 1.0
    assert endpoint_outage(7.0, 0.0, 7.0, m) == 0.5


def test_outage_array_matches_scalar(rng):
    m = MarginModel(c_offset=-1.5)
    mu = rng.normal(6, 3, 200)
    sig = np.abs(rng.normal(0, 1, 200))
    sig[:10] = 0.0
    arr = endpoint_outage_array(mu, sig, 7.0, m.c_offset)
    ref = [endpoint_outage(a, s, 7.0, m) for a, s in zip(mu, sig)]
    np.testing.assert_allclose(arr, ref, atol=1e-12)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(1e-3, 10), st.floats(0, 14))
def test_outage_monotone(mu_a, mu_b, sigma, m_avail):
    m = MarginModel()
    lo, hi = sorted((mu_a, mu_b))
    assert endpoint_outage(lo, sigma, m_avail, m) <= endpoint_outage(hi, sigma, m_avail, m)
    assert endpoint_outage(mu_a, sigma, m_avail + 1.0, m) <= endpoint_outage(mu_a, sigma, m_avail, m)


def test_window_single_endpoint():
    assert window_outage([0.3]) == pytest.approx(0.3)


def test_window_product():
    assert window_outage([0.01] * 3) == pytest.approx(0.029701, abs=1e-12)


def test_window_certain_outage():
    assert window_outage([0.2, 1.0, 0.4]) == 1.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_window_dominates_endpoints(p):
    w = window_outage(p)
    assert w >= max(p) - 1e-12
    alone = [0.0] * len(p)
    alone[0] = p[0]
    assert window_outage(alone) == pytest.approx(p[0])


def test_window_rejects_bad_probability():
    with pytest.raises(ValueError):
        window_outage([0.2, 1.2])


def test_calibrate_single_point_inversion():
    m = MarginModel()
    c = calibrate_offset_c([(7.0, 1.0, 7.0)] * 150, m)
    assert c == pytest.approx(-norm.ppf(0.10), abs=1e-6)
    assert c == pytest.approx(1.2816, abs=1e-4)
    assert m.c_frozen and m.c_offset == c


def test_calibrate_symmetric_median():
    rows = [(7.0 + d, 1.0, 7.0) for d in np.linspace(-2, 2, 101)]
    c = calibrate_offset_c(rows, target=0.5)
    assert c == pytest.approx(0.0, abs=1e-6)


def test_calibrate_hits_target(rng):
    rows = np.column_stack([rng.normal(4, 1, 500), rng.uniform(0.2, 2, 500), np.full(500, 7.0)])
    c = calibrate_offset_c(rows)
    assert np.mean(endpoint_outage_array(rows[:, 0], rows[:, 1], rows[:, 2], c)) == pytest.approx(0.10, abs=1e-6)
    assert calibrate_offset_c(rows) == pytest.approx(c, abs=1e-9)


def test_recalibration_rejected():
    m = MarginModel()
    rows = [(7.0, 1.0, 7.0)] * 150
    calibrate_offset_c(rows, m)
    with pytest.raises(AlreadyFrozen):
        calibrate_offset_c(rows, m)
    with pytest.raises(FrozenProtocolError):
        m.c_offset = 0.0


def test_unreachable_target():
    with pytest.raises(NoBracket):
        calibrate_offset_c([(7.0, 1e-3, 7.0)] * 150, target=0.1, bracket=(5.0, 10.0))


def test_too_few_epochs():
    with pytest.raises(ValueError):
        calibrate_offset_c([(7.0, 1.0, 7.0)] * 10)


def test_model_round_trip():
    m = MarginModel()
    m.freeze_offset(-3.0)
    m2 = MarginModel.from_dict(m.to_dict())
    assert m2 == m and m2.c_frozen
    with pytest.raises(FrozenProtocolError):
        m2.c_offset = 1.0


@settings(max_examples=25)
@given(st.floats(-5, 5))
def test_kappa_definition(gamma_db):
    assert MarginModel(gamma0_db=gamma_db).kappa == pytest.approx(10 ** (gamma_db / 10))
