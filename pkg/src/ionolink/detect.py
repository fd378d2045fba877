"""Causal high-pass + unit-energy template matched filter, block-maximum
threshold calibration and hysteretic onset detection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import AlreadyFrozen, ConfigError, DegenerateShape, FrozenProtocolError, InsufficientData

EULER_GAMMA = 0.5772156649015329
HYSTERESIS_GAP = 0.7  # z_lo = z_hi - 0.7


@dataclass(frozen=True)
class DetectorConfig:
    tau_hp_s: float = 200.0
    window_s: float = 200.0
    alpha_fa: float = 1e-3
    z_hi: float = 2.685
    z_lo: float = 2.685 - HYSTERESIS_GAP
    template_rise_s: float = 30.0
    template_decay_s: float = 300.0
    dt_s: float = 0.1
    n_blocks: int = 24

    def __post_init__(self):
        if not self.z_lo < self.z_hi:
            raise ConfigError("z_lo must be below z_hi")
        if not 0.0 < self.alpha_fa < 0.5:
            raise ConfigError("alpha_fa must lie in (0, 0.5)")
        if self.tau_hp_s <= 0:
            raise ConfigError("tau_hp_s must be positive")
        steps = self.window_s / self.dt_s
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("window_s must be a multiple of dt_s")

    @property
    def window_len(self) -> int:
        return int(math.floor(self.window_s / self.dt_s + 1e-9))


@dataclass
class CalibrationRecord:
    sigma_pre: float
    block_maxima: list[float]
    gumbel_mu: float
    gumbel_beta: float
    threshold: float
    method: str = "gumbel"
    frozen: bool = False

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False):
            raise FrozenProtocolError(f"calibration record is frozen; cannot set {name}")
        super().__setattr__(name, value)

    def freeze(self) -> "CalibrationRecord":
        object.__setattr__(self, "frozen", True)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationRecord":
        d = dict(d)
        frozen = d.pop("frozen", False)
        rec = cls(**d)
        return rec.freeze() if frozen else rec

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "CalibrationRecord":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def hp_coefficient(tau_hp_s: float, dt_s: float) -> float:
    return tau_hp_s / (tau_hp_s + dt_s)


def highpass(y, tau_hp_s: float, dt_s: float) -> np.ndarray:
    """u[k] = a (u[k-1] + y[k] - y[k-1]), a = tau/(tau+dt), zero initial state (y[-1] = 0)."""
    if tau_hp_s <= 0:
        raise ConfigError("tau_hp_s must be positive")
    a = hp_coefficient(tau_hp_s, dt_s)
    return lfilter([a, -a], [1.0, -a], np.asarray(y, dtype=float))


def build_template(window_s: float, dt_s: float, rise_s: float, decay_s: float) -> np.ndarray:
    """Zero-mean unit-energy rise/decay template sampled over one window."""
    if rise_s >= decay_s:
        raise DegenerateShape(f"rise ({rise_s} s) must be shorter than decay ({decay_s} s)")
    n = int(math.floor(window_s / dt_s + 1e-9))
    t = dt_s * np.arange(n)
    g = np.exp(-t / decay_s) - np.exp(-t / rise_s)
    g = g - g.mean()
    energy = math.sqrt(float(np.dot(g, g)))
    if energy == 0.0:
        raise DegenerateShape("template has no energy over the window")
    g = g / energy
    # second pass: one round of float error from the first normalisation
    g = g - g.mean()
    return g / math.sqrt(float(np.dot(g, g)))


def template_peak_time(rise_s: float, decay_s: float) -> float:
    return math.log(decay_s / rise_s) / (1.0 / rise_s - 1.0 / decay_s)


def matched_filter(u, template) -> np.ndarray:
    """z[k] = sum_j u[k-j] g[L-1-j]; the first L-1 outputs see a partial window."""
    return lfilter(np.asarray(template)[::-1], [1.0], np.asarray(u, dtype=float))


def matched_filter_norm(u, template, sigma_pre: float) -> np.ndarray:
    if sigma_pre <= 0:
        raise ConfigError("sigma_pre must be positive")
    return matched_filter(u, template) / sigma_pre


def gumbel_quantile(mu: float, beta: float, alpha: float) -> float:
    """Upper (1 - alpha) quantile of Gumbel(mu, beta)."""
    return mu - beta * math.log(-math.log(1.0 - alpha))


def fit_gumbel_moments(maxima) -> tuple[float, float]:
    m = np.asarray(maxima, dtype=float)
    beta = float(np.std(m, ddof=1)) * math.sqrt(6.0) / math.pi
    return float(np.mean(m)) - EULER_GAMMA * beta, beta


def block_maxima(x, block_len: int) -> np.ndarray:
    n_b = len(x) // block_len
    return np.asarray(x[: n_b * block_len]).reshape(n_b, block_len).max(axis=1)


def calibrate_threshold(
    z_norm_noevent,
    window_s: float,
    dt_s: float,
    alpha_fa: float,
    sigma_pre: float = 1.0,
    record: CalibrationRecord | None = None,
    min_blocks: int = 8,
) -> CalibrationRecord:
    """Block-maximum threshold at per-window false-alarm ``alpha_fa``.

    Uses the Gumbel (moment fit) quantile when the block count is too small to
    read the quantile off the empirical maxima (N_b alpha < 1).
    """
    if record is not None and record.frozen:
        raise AlreadyFrozen("detector calibration is frozen")
    L = int(math.floor(window_s / dt_s + 1e-9))
    z = np.asarray(z_norm_noevent, dtype=float)
    n_b = len(z) // L
    if n_b < min_blocks:
        raise InsufficientData(f"need at least {min_blocks} blocks of {L} samples, have {len(z)} samples")
    maxima = block_maxima(z, L)
    mu, beta = fit_gumbel_moments(maxima)
    if n_b * alpha_fa < 1.0:
        threshold, method = gumbel_quantile(mu, beta, alpha_fa), "gumbel"
    else:
        threshold, method = float(np.quantile(maxima, 1.0 - alpha_fa)), "empirical"
    rec = CalibrationRecord(
        sigma_pre=float(sigma_pre),
        block_maxima=[float(v) for v in maxima],
        gumbel_mu=mu,
        gumbel_beta=beta,
        threshold=float(threshold),
        method=method,
    )
    return rec.freeze()


def calibrate_detector(y_noevent, cfg: DetectorConfig, record: CalibrationRecord | None = None) -> CalibrationRecord:
    """Lock sigma_pre and the trigger on a no-event GF log.

    The first L-1 matched-filter outputs (partial window) are discarded; the
    log should therefore hold N_b full blocks after that prefix.
    """
    if record is not None and record.frozen:
        raise AlreadyFrozen("detector calibration is frozen")
    L = cfg.window_len
    g = build_template(cfg.window_s, cfg.dt_s, cfg.template_rise_s, cfg.template_decay_s)
    z = matched_filter(highpass(y_noevent, cfg.tau_hp_s, cfg.dt_s), g)[L - 1 :]
    if len(z) < cfg.n_blocks * L:
        raise InsufficientData(f"calibration log holds {len(z) // L} full blocks, need {cfg.n_blocks}")
    z = z[: cfg.n_blocks * L]
    sigma = float(np.std(z, ddof=1))
    return calibrate_threshold(z / sigma, cfg.window_s, cfg.dt_s, cfg.alpha_fa, sigma_pre=sigma)


def configure_from_calibration(cfg: DetectorConfig, cal: CalibrationRecord) -> DetectorConfig:
    """Detector config whose trigger is the calibrated threshold."""
    from dataclasses import replace

    return replace(cfg, z_hi=cal.threshold, z_lo=cal.threshold - HYSTERESIS_GAP)


@dataclass
class DetectionResult:
    detected: np.ndarray
    ttfa_s: float | None
    crossings: list[int] = field(default_factory=list)


def detect(z_norm, cal: CalibrationRecord, cfg: DetectorConfig, t0_s: float, dt_s: float | None = None) -> DetectionResult:
    """Latch on a rising crossing of the calibrated trigger, clear below ``cfg.z_lo``.

    TTFA is the delay from ``t0_s`` to the first epoch at or after ``t0_s``
    where z_norm is at or above the trigger.
    """
    if not cal.frozen:
        raise FrozenProtocolError("detection requires a frozen calibration")
    dt = cfg.dt_s if dt_s is None else dt_s
    z = np.asarray(z_norm, dtype=float)
    thr = cal.threshold
    state = DetectorState(thr, cfg.z_lo)
    flags = np.zeros(len(z), dtype=bool)
    for k, v in enumerate(z):
        flags[k] = state.update(v)
    k0 = int(math.ceil(t0_s / dt - 1e-9))
    above = np.nonzero(z[k0:] >= thr)[0]
    ttfa = None if len(above) == 0 else float((k0 + above[0]) * dt - t0_s)
    return DetectionResult(flags, ttfa, state.crossings)


class DetectorState:
    """Streaming latch: set on z crossing up through ``z_hi``, cleared below ``z_lo``."""

    __slots__ = ("z_hi", "z_lo", "detected", "prev", "k", "crossings")

    def __init__(self, z_hi: float, z_lo: float):
        self.z_hi = z_hi
        self.z_lo = z_lo
        self.detected = False
        self.prev = -math.inf
        self.k = 0
        self.crossings: list[int] = []

    def update(self, z: float) -> bool:
        if self.prev < self.z_hi <= z:
            self.crossings.append(self.k)
            self.detected = True
        elif self.detected and z < self.z_lo:
            self.detected = False
        self.prev = z
        self.k += 1
        return self.detected


class StreamingFrontEnd:
    """Per-epoch HPF + matched filter with O(L) memory.

    The sample history lives in a doubled ring buffer so the trailing window is
    always one contiguous slice.
    """

    def __init__(self, cfg: DetectorConfig, sigma_pre: float = 1.0):
        self.a = hp_coefficient(cfg.tau_hp_s, cfg.dt_s)
        self.template = build_template(cfg.window_s, cfg.dt_s, cfg.template_rise_s, cfg.template_decay_s)
        self.L = len(self.template)
        self.buf = np.zeros(2 * self.L)
        self.pos = 0
        self.u = 0.0
        self.y_prev = 0.0
        self.inv_sigma = 1.0 / sigma_pre

    def step(self, y: float) -> tuple[float, float]:
        """Returns (high-passed sample, normalised matched-filter output)."""
        self.u = self.a * (self.u + y - self.y_prev)
        self.y_prev = y
        L, p = self.L, self.pos
        self.buf[p] = self.u
        self.buf[p + L] = self.u
        self.pos = (p + 1) % L
        # oldest sample sits at the new write position
        z = float(np.dot(self.buf[p + 1 : p + 1 + L], self.template))
        return self.u, z * self.inv_sigma
