"""Required-margin forecast and endpoint/window outage probability."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import AlreadyFrozen, ConfigError, FrozenProtocolError, NoBracket

log = logging.getLogger(__name__)

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@dataclass
class MarginModel:
    m0: float = 3.2  # dB
    k1: float = 1.2  # dB/TECU
    k2: float = 22.0  # dB/(TECU/s)
    rho: float = 1.0
    gamma0_db: float = 13.0
    c_offset: float = 0.0  # dB
    c_frozen: bool = False

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ConfigError("margin sensitivities must be non-negative")

    def __setattr__(self, name, value):
        if name == "c_offset" and getattr(self, "c_frozen", False):
            raise FrozenProtocolError("margin offset c is frozen")
        super().__setattr__(name, value)

    @property
    def kappa(self) -> float:
        return self.rho * 10.0 ** (self.gamma0_db / 10.0)

    def freeze_offset(self, c: float) -> None:
        if self.c_frozen:
            raise AlreadyFrozen("margin offset c is already frozen")
        self.c_offset = float(c)
        object.__setattr__(self, "c_frozen", True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MarginModel":
        d = dict(d)
        frozen = d.pop("c_frozen", False)
        m = cls(**d)
        if frozen:
            object.__setattr__(m, "c_frozen", True)
        return m


@dataclass(frozen=True)
class RiskForecast:
    mu_req_db: float
    sigma_req_db: float
    p_out: float
    horizon_s: float


def uncertainty_penalty(p11_tecu2: float, k_eff: float, model: MarginModel) -> float:
    """10 log10(1 + kappa K_eff^2 P11), dB."""
    if p11_tecu2 < 0:
        raise ValueError("variance must be non-negative")
    return 10.0 * math.log10(1.0 + model.kappa * k_eff * k_eff * p11_tecu2)


def required_margin_forecast(mu_xi, P_xixi, k_eff: float, p11_horizon: float | None, model: MarginModel):
    """Linearised mean/std of the required margin at the horizon.

    mean = m0 + k1 [mu1]^+ + k2 |mu2| + penalty(P11 at horizon);
    var = g^T P g with g = [k1 step(mu1), k2 sgn(mu2)], step(0) = sgn(0) = 0.
    """
    mu1, mu2 = float(mu_xi[0]), float(mu_xi[1])
    p11 = float(P_xixi[0][0]) if p11_horizon is None else float(p11_horizon)
    mean = model.m0 + model.k1 * max(mu1, 0.0) + model.k2 * abs(mu2) + uncertainty_penalty(p11, k_eff, model)
    g1 = model.k1 if mu1 > 0 else 0.0
    g2 = model.k2 * (1.0 if mu2 > 0 else -1.0 if mu2 < 0 else 0.0)
    var = g1 * g1 * P_xixi[0][0] + 2.0 * g1 * g2 * P_xixi[0][1] + g2 * g2 * P_xixi[1][1]
    return mean, math.sqrt(max(float(var), 0.0))


def endpoint_outage(mu_req_db: float, sigma_req_db: float, m_avail_db: float, model: MarginModel) -> float:
    """Phi((mu_req - m_avail - c) / sigma_req); indicator limit at sigma = 0 (tie -> 0.5)."""
    if sigma_req_db < 0:
        raise ValueError("sigma_req must be non-negative")
    arg = mu_req_db - m_avail_db - model.c_offset
    if sigma_req_db == 0.0:
        return 1.0 if arg > 0 else 0.0 if arg < 0 else 0.5
    return 0.5 * math.erfc(-arg / sigma_req_db * _SQRT1_2)


def endpoint_outage_array(mu, sigma, m_avail, c_offset: float) -> np.ndarray:
    mu, sigma, m_avail = (np.asarray(v, dtype=float) for v in (mu, sigma, m_avail))
    arg = mu - m_avail - c_offset
    with np.errstate(divide="ignore", invalid="ignore"):
        p = ndtr(arg / sigma)
    limit = np.where(arg > 0, 1.0, np.where(arg < 0, 0.0, 0.5))
    return np.where(sigma > 0, p, limit)


def window_outage(p_endpoints: Iterable[float]) -> float:
    """1 - prod(1 - p_i) over endpoint probabilities sampled inside the window."""
    p = np.asarray(list(p_endpoints), dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - p))


def calibrate_offset_c(
    preevent_forecasts: Sequence[tuple[float, float, float]],
    model: MarginModel | None = None,
    target: float = 0.10,
    bracket: tuple[float, float] = (-60.0, 60.0),
    min_epochs: int = 100,
) -> float:
    """Offset c making the mean pre-event endpoint outage equal ``target``.

    Bisection on ``bracket``; freezes ``model`` when one is given.
    """
    if model is not None and model.c_frozen:
        raise AlreadyFrozen("margin offset c is already frozen")
    arr = np.asarray(preevent_forecasts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) < min_epochs:
        raise ValueError(f"need at least {min_epochs} (mu_req, sigma_req, m_avail) rows")
    mu, sigma, m_avail = arr.T

    def excess(c):
        return float(np.mean(endpoint_outage_array(mu, sigma, m_avail, c))) - target

    lo, hi = bracket
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo < 0 or f_hi > 0:
        raise NoBracket(f"target {target} not reachable for c in {bracket}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    c = 0.5 * (lo + hi)
    if abs(excess(c)) > 1e-6:
        log.warning("mean outage jumps across the target at c=%.6f (residual %.2e)", c, excess(c))
    if model is not None:
        model.freeze_offset(c)
    return c


def forecast(mu_xi, P_xixi, k_eff: float, m_avail_db: float, model: MarginModel, horizon_s: float) -> RiskForecast:
    mu_req, sigma_req = required_margin_forecast(mu_xi, P_xixi, k_eff, None, model)
    return RiskForecast(mu_req, sigma_req, endpoint_outage(mu_req, sigma_req, m_avail_db, model), horizon_s)
