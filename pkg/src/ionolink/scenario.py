"""Flare-driven scenario emulation: XRS excess -> dVTEC -> 10 Hz GF phase."""

from __future__ import annotations

import csv
import json
import math
from datetime import datetime, timezone
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, GridMismatch
from .geometry import GeometryConfig, effective_gain
from .xrs import MINUTE_S, XrsSeries, detrend_flux, synthetic_flare

DT_XRS_S = 60.0
REFERENCE_PEAK_TECU = 3.6


@dataclass(frozen=True)
class BiasDrift:
    """Integrated random walk on (b, db/dt); densities match the estimator's q3, q4."""

    enabled: bool = True
    q_bias: float = (2e-7) ** 2  # rad^2/s
    q_bias_rate: float = (5e-8) ** 2  # (rad/s)^2/s
    b0_rad: float = 0.0
    b_rate0_rad_s: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    cn0_dbhz: float = 52.0
    dt_s: float = 0.1
    amplitude_scale: float = 1.0
    tau_d_s: float = 600.0
    alpha0: float | None = None  # None: normalise to REFERENCE_PEAK_TECU at unit scale
    gamma_exp: float = 0.5
    chi_mode: str = "constant"  # "constant" | "computed"
    chi_rad: float = 0.0
    lat_deg: float = 0.0
    lon_deg: float = 0.0
    bias_drift: BiasDrift = field(default_factory=BiasDrift)
    noise: bool = True
    rng_seed: int = 0
    t0_s: float = 900.0
    vtec0_tecu: float = 12.0
    baseline_window_min: int = 60

    def __post_init__(self):
        if self.dt_s <= 0:
            raise ConfigError("dt_s must be positive")
        if not 40.0 <= self.cn0_dbhz <= 70.0:
            raise ConfigError(f"C/N0 {self.cn0_dbhz} dB-Hz outside [40, 70]")
        if self.tau_d_s <= 0:
            raise ConfigError("tau_d_s must be positive")
        if self.amplitude_scale <= 0:
            raise ConfigError("amplitude_scale must be positive")
        if self.chi_mode not in ("constant", "computed"):
            raise ConfigError(f"unknown chi_mode {self.chi_mode!r}")

    @property
    def noise_var(self) -> float:
        """Differential phase noise variance, rad^2."""
        return 1.0 / (10.0 ** (self.cn0_dbhz / 10.0) * self.dt_s)

    @property
    def k_eff(self) -> float:
        return effective_gain(self.geometry)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "geometry" in d:
            d["geometry"] = GeometryConfig(**d["geometry"])
        if "bias_drift" in d:
            d["bias_drift"] = BiasDrift(**d["bias_drift"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **changes) -> "ScenarioConfig":
        geo = {k[4:]: changes.pop(k) for k in list(changes) if k.startswith("geo_")}
        cfg = replace(self, **changes)
        if geo:
            cfg = replace(cfg, geometry=replace(cfg.geometry, **geo))
        return cfg


def load_scenario_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            return ScenarioConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def save_scenario_config(cfg: ScenarioConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)


class EpochSample(NamedTuple):
    t_s: float
    y_rad: float
    truth_dvtec_tecu: float
    truth_bias_rad: float


@dataclass
class Trace:
    """Column-oriented 10 Hz trace."""

    t_s: np.ndarray
    y_rad: np.ndarray
    truth_dvtec_tecu: np.ndarray
    truth_bias_rad: np.ndarray
    truth_rate_tecu_s: np.ndarray
    dt_s: float
    t0_s: float
    k_eff: float

    def __len__(self):
        return len(self.t_s)

    def __iter__(self) -> Iterator[EpochSample]:
        for row in zip(self.t_s, self.y_rad, self.truth_dvtec_tecu, self.truth_bias_rad):
            yield EpochSample(*map(float, row))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s", "y_rad", "truth_dvtec_tecu", "truth_bias_rad"])
            for s in self:
                w.writerow([f"{s.t_s:.1f}", repr(s.y_rad), repr(s.truth_dvtec_tecu), repr(s.truth_bias_rad)])


def solar_zenith(t_utc: float, lat_deg: float, lon_deg: float) -> float:
    """Low-accuracy solar zenith angle (rad) from declination and hour angle."""
    if abs(lat_deg) > 90 or abs(lon_deg) > 180:
        raise ConfigError("latitude/longitude out of range")
    day_s = t_utc % 86400.0
    doy = datetime.fromtimestamp(t_utc, tz=timezone.utc).timetuple().tm_yday
    decl = math.radians(-23.44) * math.cos(2.0 * math.pi * (doy + 10) / 365.0)
    b = 2.0 * math.pi * (doy - 81) / 364.0
    eot_min = 9.87 * math.sin(2 * b) - 7.53 * math.cos(b) - 1.5 * math.sin(b)
    solar_time_h = day_s / 3600.0 + lon_deg / 15.0 + eot_min / 60.0
    hour_angle = math.radians(15.0 * (solar_time_h - 12.0))
    lat = math.radians(lat_deg)
    cos_chi = math.sin(lat) * math.sin(decl) + math.cos(lat) * math.cos(decl) * math.cos(hour_angle)
    return math.acos(max(-1.0, min(1.0, cos_chi)))


def zenith_series(timestamps_utc, cfg: ScenarioConfig) -> np.ndarray:
    if cfg.chi_mode == "constant":
        return np.full(len(timestamps_utc), cfg.chi_rad)
    return np.array([solar_zenith(float(t), cfg.lat_deg, cfg.lon_deg) for t in timestamps_utc])


def _drive_gain(chi: np.ndarray, gamma_exp: float) -> np.ndarray:
    # no photo-ionisation drive with the sun below the horizon
    return np.clip(np.cos(chi), 0.0, None) ** gamma_exp


def _relax(drive: np.ndarray, tau_d_s: float) -> np.ndarray:
    decay = math.exp(-DT_XRS_S / tau_d_s)
    out = np.empty_like(drive)
    acc = 0.0
    for k, d in enumerate(drive):
        acc = decay * acc + d
        out[k] = acc
    return out


def xrs_to_dvtec(dfx, cfg: ScenarioConfig, chi=None, timestamps_utc=None) -> np.ndarray:
    """First-order driven relaxation on the 60 s grid, TECU.

    dvtec[k] = exp(-60/tau_d) dvtec[k-1] + alpha0 cos^gamma(chi_k) dfx[k] 60,
    times ``amplitude_scale``. NaN entries of ``dfx`` (missing minutes) drive nothing.
    """
    dfx = np.nan_to_num(np.asarray(dfx, dtype=float), nan=0.0)
    if np.any(dfx < 0):
        raise ValueError("flux excess must be non-negative")
    if timestamps_utc is not None:
        ts = np.asarray(timestamps_utc)
        if len(ts) != len(dfx) or (len(ts) > 1 and np.any(np.diff(ts) != MINUTE_S)):
            raise GridMismatch("flux excess is not on a contiguous 60 s grid")
    if chi is None:
        chi = np.full(len(dfx), cfg.chi_rad) if timestamps_utc is None else zenith_series(timestamps_utc, cfg)
    alpha0 = 1.0 if cfg.alpha0 is None else cfg.alpha0
    drive = alpha0 * _drive_gain(np.asarray(chi, dtype=float), cfg.gamma_exp) * dfx * DT_XRS_S
    return cfg.amplitude_scale * _relax(drive, cfg.tau_d_s)


def alpha0_for_peak(dfx, cfg: ScenarioConfig, peak_tecu: float = REFERENCE_PEAK_TECU, chi=None) -> float:
    """Drive gain that makes the unit-scale response peak at ``peak_tecu``."""
    unit = xrs_to_dvtec(dfx, replace(cfg, alpha0=1.0, amplitude_scale=1.0), chi=chi)
    top = float(np.max(unit))
    if top <= 0:
        raise ValueError("flux excess never drives the response")
    return peak_tecu / top


def synthesize_trace(dvtec_60s, cfg: ScenarioConfig, duration_s: float | None = None) -> Trace:
    """10 Hz dual-carrier GF observable y = K_eff dVTEC + b + v.

    ``dvtec_60s[k]`` is the value at t = 60 k s from trace start; in between it is
    linearly interpolated. Reproducible for a fixed ``rng_seed``.
    """
    grid_vals = np.asarray(dvtec_60s, dtype=float)
    grid_t = DT_XRS_S * np.arange(len(grid_vals))
    if duration_s is None:
        duration_s = grid_t[-1]
    n = int(round(duration_s / cfg.dt_s))
    t = cfg.dt_s * np.arange(n)
    dvtec = np.interp(t, grid_t, grid_vals)
    slope = np.diff(grid_vals) / DT_XRS_S
    seg = np.clip((t // DT_XRS_S).astype(int), 0, max(len(slope) - 1, 0))
    rate = slope[seg] if len(slope) else np.zeros(n)
    rate[t >= grid_t[-1]] = 0.0

    noise_rng, bias_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.rng_seed).spawn(2))
    k_eff = cfg.k_eff
    bias = np.zeros(n)
    bd = cfg.bias_drift
    if bd.enabled:
        w_b = bias_rng.normal(0.0, math.sqrt(bd.q_bias * cfg.dt_s), n)
        w_r = bias_rng.normal(0.0, math.sqrt(bd.q_bias_rate * cfg.dt_s), n)
        # b_{k+1} = b_k + dt bdot_k + w_b,k ; bdot_{k+1} = bdot_k + w_r,k
        bias_rate = bd.b_rate0_rad_s + np.concatenate([[0.0], np.cumsum(w_r[:-1])])
        bias = bd.b0_rad + np.concatenate([[0.0], np.cumsum(cfg.dt_s * bias_rate[:-1] + w_b[:-1])])
    y = k_eff * dvtec + bias
    if cfg.noise:
        y = y + noise_rng.normal(0.0, math.sqrt(cfg.noise_var), n)
    return Trace(t, y, dvtec, bias, rate, cfg.dt_s, cfg.t0_s, k_eff)


def check_cycle_slip(y) -> list[int]:
    """Sample indices k with |y[k] - y[k-1]| >= pi/2."""
    y = np.asarray(getattr(y, "y_rad", y), dtype=float)
    if len(y) == 0:
        raise ValueError("empty trace")
    return [int(k) + 1 for k in np.nonzero(np.abs(np.diff(y)) >= math.pi / 2)[0]]


# Named GOES-shaped morphologies; onset at 15 min into a 150 min record.
EVENT_LIBRARY: dict[str, dict] = {
    "impulsive": dict(rise_min=4.0, decay_min=12.0),
    "gradual": dict(rise_min=8.0, decay_min=25.0),
    "double": dict(rise_min=5.0, decay_min=15.0, second_peak=(14.0, 0.6)),
    "long": dict(rise_min=10.0, decay_min=40.0),
}
CALIBRATION_EVENT = "gradual"


def event_flux(name: str, duration_min: int = 150, onset_min: int = 15, peak_wm2: float = 1e-4) -> XrsSeries:
    try:
        shape = EVENT_LIBRARY[name]
    except KeyError:
        raise ConfigError(f"unknown event {name!r}; known: {sorted(EVENT_LIBRARY)}") from None
    return synthetic_flare(duration_min=duration_min, onset_min=onset_min, peak_wm2=peak_wm2, **shape)


def build_scenario(series: XrsSeries, cfg: ScenarioConfig, duration_s: float | None = None) -> Trace:
    """Detrend, map to dVTEC and synthesize the 10 Hz trace for one XRS record.

    Gaps in the record drive nothing (zero excess) and are logged at parse time.
    With ``cfg.alpha0`` unset the drive gain is normalised so the unit-scale
    response peaks at the reference value.
    """
    grid, flux = series.dense()
    filled = XrsSeries(grid, np.nan_to_num(flux, nan=np.nanmin(flux)), series.source_tag)
    dfx = detrend_flux(filled, min(cfg.baseline_window_min, len(filled)))
    dfx[np.isnan(flux)] = 0.0
    chi = zenith_series(grid, cfg)
    if cfg.alpha0 is None:
        cfg = replace(cfg, alpha0=alpha0_for_peak(dfx, cfg, chi=chi))
    dvtec = xrs_to_dvtec(dfx, cfg, chi=chi, timestamps_utc=grid)
    if duration_s is None:
        duration_s = DT_XRS_S * len(dvtec)
    return synthesize_trace(dvtec, cfg, duration_s)


def quiet_trace(cfg: ScenarioConfig, duration_s: float) -> Trace:
    """No-event trace (dVTEC identically zero)."""
    n_grid = int(math.ceil(duration_s / DT_XRS_S)) + 1
    return synthesize_trace(np.zeros(n_grid), cfg, duration_s)
