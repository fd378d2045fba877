"""Thin-shell slant/vertical mapping and geometry-free phase gain."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

SPEED_OF_LIGHT = 299_792_458.0  # m/s
K_IONO = 40.3
TECU = 1e16  # electrons / m^2


@dataclass(frozen=True)
class GeometryConfig:
    f1_hz: float = 20.2e9
    f2_hz: float = 19.7e9
    elevation_deg: float = 40.0
    shell_height_km: float = 350.0
    earth_radius_km: float = 6371.0

    def __post_init__(self):
        if self.f1_hz == self.f2_hz:
            raise ConfigError("carrier frequencies must differ")
        if self.f1_hz <= 0 or self.f2_hz <= 0:
            raise ConfigError("carrier frequencies must be positive")
        if not 0.0 < self.elevation_deg <= 90.0:
            raise ConfigError(f"elevation must lie in (0, 90] deg, got {self.elevation_deg}")
        if self.shell_height_km <= 0 or self.earth_radius_km <= 0:
            raise ConfigError("shell height and Earth radius must be positive")

    @property
    def elevation_rad(self) -> float:
        return math.radians(self.elevation_deg)

    @property
    def shell_ratio(self) -> float:
        """a = R_E / (R_E + h_I)."""
        return self.earth_radius_km / (self.earth_radius_km + self.shell_height_km)


def mapping_factor(cfg: GeometryConfig) -> float:
    """Slant-to-vertical obliquity factor M(elevation); equals 1 at zenith."""
    a_cos = cfg.shell_ratio * math.cos(cfg.elevation_rad)
    if cfg.elevation_deg == 90.0:
        a_cos = 0.0
    return 1.0 / math.sqrt(1.0 - a_cos * a_cos)


def mapping_sensitivity(cfg: GeometryConfig) -> float:
    """dM/d(elevation) per radian."""
    if cfg.elevation_deg == 90.0:
        return 0.0
    a2 = cfg.shell_ratio**2
    el = cfg.elevation_rad
    return -a2 * math.sin(el) * math.cos(el) / (1.0 - a2 * math.cos(el) ** 2) ** 1.5


def gf_coefficient(cfg: GeometryConfig) -> float:
    """Geometry-free phase per TECU of slant content, rad/TECU.

    Positive when f1 > f2.
    """
    return -(2.0 * math.pi * K_IONO * TECU / SPEED_OF_LIGHT) * (1.0 / cfg.f1_hz - 1.0 / cfg.f2_hz)


def effective_gain(cfg: GeometryConfig) -> float:
    """K_eff = k_GF * M(elevation), rad per TECU of vertical content."""
    return gf_coefficient(cfg) * mapping_factor(cfg)
