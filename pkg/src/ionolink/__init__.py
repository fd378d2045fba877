"""Ionosphere-aware, risk-gated link adaptation for Ka-band satellite links.

Sensing (GF phase -> high-pass/matched filter -> Kalman filter), a horizon
outage forecast and a discrete MCS controller, evaluated by deterministic
replay of flare-driven scenarios.
"""

from .errors import ConfigError, DataError, FrozenProtocolError, IonolinkError
from .geometry import GeometryConfig, effective_gain, gf_coefficient, mapping_factor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FrozenProtocolError",
    "GeometryConfig",
    "IonolinkError",
    "effective_gain",
    "gf_coefficient",
    "mapping_factor",
]
