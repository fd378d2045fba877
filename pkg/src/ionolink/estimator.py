"""Four-state nearly-constant-velocity Kalman filter on the pre-HPF GF observable.

State: [dVTEC (TECU), dVTEC rate (TECU/s), bias b (rad), bias rate (rad/s)].
Observation: y = K_eff dVTEC + b + v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalBreakdown

BAND_Z = 1.96
PRIOR_STD = np.array([1.0, 0.01, 0.01, 1e-6])


@dataclass(frozen=True)
class NoiseConfig:
    q1: float = (7e-5) ** 2  # TECU^2/s
    q2: float = (2e-4) ** 2  # (TECU/s)^2/s
    q3: float = (2e-7) ** 2  # rad^2/s
    q4: float = (5e-8) ** 2  # (rad/s)^2/s
    r_var: float = 1.0 / (10 ** 5.2 * 0.1)  # rad^2, C/N0 = 52 dB-Hz at 10 Hz

    def __post_init__(self):
        if min(self.q1, self.q2, self.q3, self.q4, self.r_var) <= 0:
            raise ConfigError("noise densities and measurement variance must be positive")

    @classmethod
    def from_cn0(cls, cn0_dbhz: float, dt_s: float, **q) -> "NoiseConfig":
        return cls(r_var=1.0 / (10 ** (cn0_dbhz / 10) * dt_s), **q)

    @property
    def q_diag(self) -> np.ndarray:
        return np.array([self.q1, self.q2, self.q3, self.q4])


@dataclass
class FilterState:
    x_hat: np.ndarray
    P: np.ndarray
    last_nis: float = 0.0
    last_innovation_rad: float = 0.0
    last_innovation_var: float = 0.0


def transition(dt_s: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 1] = dt_s
    F[2, 3] = dt_s
    return F


def kf_init(prior_dvtec: float = 0.0, prior_var_scale: float = 1.0) -> FilterState:
    if prior_var_scale <= 0:
        raise ConfigError("prior_var_scale must be positive")
    x = np.zeros(4)
    x[0] = prior_dvtec
    return FilterState(x, np.diag(PRIOR_STD**2) * prior_var_scale)


class KalmanFilter:
    """Mutable filter with the model matrices precomputed for a fixed dt.

    ``x`` may be a (4,) vector or a (4, M) batch of independent runs sharing one
    covariance (the covariance recursion does not depend on the data).
    """

    def __init__(self, state: FilterState, dt_s: float, k_eff: float, noise: NoiseConfig):
        if dt_s <= 0:
            raise ConfigError("dt_s must be positive")
        self.F = transition(dt_s)
        self.Qd = np.diag(noise.q_diag * dt_s)
        self.h = np.array([k_eff, 0.0, 1.0, 0.0])
        self.R = noise.r_var
        self.x = np.array(state.x_hat, dtype=float)
        self.P = np.array(state.P, dtype=float)
        self.nis = state.last_nis
        self.nu = state.last_innovation_rad
        self.S = state.last_innovation_var
        self._I = np.eye(4)

    def step(self, y):
        F, h = self.F, self.h
        x = F @ self.x
        P = F @ self.P @ F.T + self.Qd
        Ph = P @ h
        S = float(h @ Ph) + self.R
        if not S > 0.0:
            raise NumericalBreakdown(f"innovation variance {S} is not positive")
        K = Ph / S
        nu = y - h @ x
        self.x = x + (np.multiply.outer(K, nu) if np.ndim(nu) else K * nu)
        A = self._I - np.outer(K, h)
        P = A @ P @ A.T + self.R * np.outer(K, K)  # Joseph form
        self.P = 0.5 * (P + P.T)
        self.nu = nu
        self.S = S
        self.nis = nu * nu / S
        return self

    @property
    def state(self) -> FilterState:
        return FilterState(self.x.copy(), self.P.copy(), self.nis, self.nu, self.S)


def kf_step(state: FilterState, y_k: float, dt_s: float, k_eff: float, noise: NoiseConfig) -> FilterState:
    """One predict/update; returns a new state and leaves ``state`` untouched."""
    return KalmanFilter(state, dt_s, k_eff, noise).step(y_k).state


def confidence_band(state: FilterState) -> float:
    """95 % half-width on dVTEC, TECU."""
    return BAND_Z * math.sqrt(max(float(state.P[0, 0]), 0.0))


def horizon_process_cov(H_s: float, dt_s: float, noise: NoiseConfig) -> np.ndarray:
    """Accumulated (dVTEC, rate) process covariance over n = H/dt model steps.

    Exact sum of F^j Q dt F^j^T for the discrete model, which tends to
    [[q1 H + q2 H^3/3, q2 H^2/2], [q2 H^2/2, q2 H]] as dt -> 0.
    """
    n = int(round(H_s / dt_s))
    if n < 1 or abs(n * dt_s - H_s) > 1e-9 * max(H_s, 1.0):
        # off-grid horizon: continuous-time limit
        q1, q2 = noise.q1, noise.q2
        return np.array([[q1 * H_s + q2 * H_s**3 / 3, q2 * H_s**2 / 2], [q2 * H_s**2 / 2, q2 * H_s]])
    s1 = n * (n - 1) / 2.0
    s2 = (n - 1) * n * (2 * n - 1) / 6.0
    q1, q2 = noise.q1 * dt_s, noise.q2 * dt_s
    return np.array([[q1 * n + q2 * dt_s**2 * s2, q2 * dt_s * s1], [q2 * dt_s * s1, q2 * n]])


def propagate_horizon(state: FilterState, H_s: float, dt_s: float, noise: NoiseConfig, Q_H: np.ndarray | None = None):
    """Mean and covariance of (dVTEC, rate) H seconds ahead."""
    if H_s <= 0:
        raise ConfigError("horizon must be positive")
    FH = np.array([[1.0, H_s], [0.0, 1.0]])
    mu = FH @ np.asarray(state.x_hat, dtype=float)[:2]
    if Q_H is None:
        Q_H = horizon_process_cov(H_s, dt_s, noise)
    P = FH @ np.asarray(state.P)[:2, :2] @ FH.T + Q_H
    return mu, 0.5 * (P + P.T)
