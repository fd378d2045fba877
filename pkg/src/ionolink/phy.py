"""MCS ladder, margin bookkeeping and the logistic BLER-margin anchor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import AlreadyFrozen, BetaOutOfRange, ConfigError, FrozenProtocolError, PoorConditioning, RateNotOnLadder

LN10_OVER_10LN2 = math.log(10.0) / (10.0 * math.log(2.0))


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation: str
    code_rate: str
    r_bpshz: float


DEFAULT_ENTRIES = (
    McsEntry(3, "16QAM", "3/4", 4.0),
    McsEntry(4, "64QAM", "2/3", 5.0),
    McsEntry(5, "64QAM", "5/6", 6.4),
)


@dataclass(frozen=True)
class McsLadder:
    entries: tuple[McsEntry, ...] = DEFAULT_ENTRIES
    k_r: float = 0.20  # bps/Hz/dB

    def __post_init__(self):
        rates = [e.r_bpshz for e in self.entries]
        if not rates or rates != sorted(rates):
            raise ConfigError("ladder entries must be sorted by rate")
        if self.k_r <= 0:
            raise ConfigError("k_r must be positive")

    @property
    def r_min(self) -> float:
        return self.entries[0].r_bpshz

    @property
    def r_max(self) -> float:
        return self.entries[-1].r_bpshz

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]

    def rate_of(self, mcs_index: int) -> float:
        for e in self.entries:
            if e.index == mcs_index:
                return e.r_bpshz
        raise RateNotOnLadder(f"MCS-{mcs_index} is not on the ladder")

    def index_of(self, r_bpshz: float) -> int:
        for e in self.entries:
            if abs(e.r_bpshz - r_bpshz) < 1e-9:
                return e.index
        raise RateNotOnLadder(f"{r_bpshz} bps/Hz is not on the ladder")

    def step(self, mcs_index: int, delta: int) -> int:
        """Neighbouring index ``delta`` rungs away, clipped to the ladder."""
        idx = self.indices
        pos = min(max(idx.index(mcs_index) + delta, 0), len(idx) - 1)
        return idx[pos]

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "k_r": self.k_r}

    @classmethod
    def from_dict(cls, d: dict) -> "McsLadder":
        return cls(tuple(McsEntry(**e) for e in d["entries"]), d["k_r"])


@dataclass
class BlerAnchor:
    k_slope: float = 1.01  # 1/dB
    m_piv_db: float = 0.72
    bler_min: float = 0.0
    bler_max: float = 1.0
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 <= self.bler_min < self.bler_max <= 1.0:
            raise ConfigError("need 0 <= bler_min < bler_max <= 1")
        if self.k_slope <= 0:
            raise ConfigError("logistic slope must be positive")

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False):
            raise FrozenProtocolError(f"BLER anchor is frozen; cannot set {name}")
        super().__setattr__(name, value)

    def freeze(self) -> "BlerAnchor":
        object.__setattr__(self, "frozen", True)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BlerAnchor":
        d = dict(d)
        frozen = d.pop("frozen", False)
        a = cls(**d)
        return a.freeze() if frozen else a


def available_extra_margin(r_bpshz: float, ladder: McsLadder) -> float:
    """(r_max - r) / k_r, dB."""
    ladder.index_of(r_bpshz)
    return (ladder.r_max - r_bpshz) / ladder.k_r


def effective_margin(m_avail_db, m_req_db):
    return m_avail_db - m_req_db


def _logistic_tail(x: float) -> float:
    """1 / (1 + exp(x)) without overflow."""
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def bler(m_eff_db: float, anchor: BlerAnchor) -> float:
    """Logistic BLER, decreasing in effective margin, pivot at m_piv."""
    frac = _logistic_tail(anchor.k_slope * (m_eff_db - anchor.m_piv_db))
    return anchor.bler_min + (anchor.bler_max - anchor.bler_min) * frac


def bler_array(m_eff_db, anchor: BlerAnchor) -> np.ndarray:
    from scipy.special import expit

    frac = expit(-anchor.k_slope * (np.asarray(m_eff_db, dtype=float) - anchor.m_piv_db))
    return anchor.bler_min + (anchor.bler_max - anchor.bler_min) * frac


def margin_threshold(beta: float, anchor: BlerAnchor) -> float:
    """Effective margin at which BLER equals ``beta`` (inverse of ``bler``)."""
    if not anchor.bler_min < beta < anchor.bler_max:
        raise BetaOutOfRange(f"target BLER {beta} outside ({anchor.bler_min}, {anchor.bler_max})")
    return anchor.m_piv_db + math.log((anchor.bler_max - beta) / (beta - anchor.bler_min)) / anchor.k_slope


def fit_bler_anchor(
    pairs,
    bler_min: float = 0.0,
    bler_max: float = 1.0,
    anchor: BlerAnchor | None = None,
    min_pairs: int = 20,
) -> BlerAnchor:
    """Least-squares (k, m_piv) with fixed floor/ceiling; the result is frozen."""
    if anchor is not None and anchor.frozen:
        raise AlreadyFrozen("BLER anchor is frozen and cannot be refit")
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < min_pairs:
        raise PoorConditioning(f"need at least {min_pairs} (m_eff, bler) pairs")
    m, b = arr.T
    span = (b - bler_min) / (bler_max - bler_min)
    if np.ptp(m) < 1e-6 or not (np.any(span < 0.5) and np.any(span > 0.5)):
        raise PoorConditioning("pairs do not span the logistic transition")
    inner = (span > 0.02) & (span < 0.98)
    if inner.sum() >= 2 and np.ptp(m[inner]) > 0:
        # logit-linear start: ln(1/span - 1) = k (m - m_piv)
        slope, icpt = np.polyfit(m[inner], np.log(1.0 / span[inner] - 1.0), 1)
        k0 = max(slope, 1e-2)
        x0 = [k0, -icpt / slope if slope > 0 else float(np.median(m))]
    else:
        x0 = [1.0, float(m[np.argmin(np.abs(span - 0.5))])]

    def resid(p):
        return bler_array(m, BlerAnchor(max(p[0], 1e-9), p[1], bler_min, bler_max)) - b

    sol = least_squares(resid, x0, bounds=([1e-6, -np.inf], [np.inf, np.inf]), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success:
        raise PoorConditioning(sol.message)
    return BlerAnchor(float(sol.x[0]), float(sol.x[1]), bler_min, bler_max).freeze()


def binned_pairs(m_eff, bler_emp, bin_width_db: float = 0.25, min_count: int = 5) -> np.ndarray:
    """(bin-centre m_eff, mean empirical BLER) for bins with enough samples."""
    m_eff = np.asarray(m_eff, dtype=float)
    bler_emp = np.asarray(bler_emp, dtype=float)
    idx = np.floor(m_eff / bin_width_db).astype(int)
    out = []
    for b in np.unique(idx):
        sel = idx == b
        if sel.sum() >= min_count:
            out.append(((b + 0.5) * bin_width_db, float(bler_emp[sel].mean())))
    return np.array(out)


def goodput(eta: float, bler_val: float, r_bpshz: float) -> float:
    """(1 - eta)(1 - BLER) r, bps/Hz."""
    if not 0.0 <= eta <= 1.0 or not 0.0 <= bler_val <= 1.0:
        raise ValueError("eta and BLER must lie in [0, 1]")
    return (1.0 - eta) * (1.0 - bler_val) * r_bpshz


def rate_margin_slope(eta_e: float, gamma0_linear: float) -> float:
    """d r / d gamma_dB at gamma0 for r = eta log2(1 + gamma), bps/Hz/dB."""
    if gamma0_linear <= 0:
        raise ValueError("gamma0 must be positive")
    return eta_e * LN10_OVER_10LN2 * gamma0_linear / (1.0 + gamma0_linear)


@dataclass
class LinkEmulator:
    """Stand-in for link-level truth: Bernoulli block errors on a reference curve.

    Only used to produce the empirical scatter the anchor is fitted to; scoring
    always goes through the frozen anchor.
    """

    reference: BlerAnchor = field(default_factory=BlerAnchor)
    blocks_per_epoch: int = 50

    def empirical_bler(self, m_eff_true, rng: np.random.Generator) -> np.ndarray:
        p = bler_array(m_eff_true, self.reference)
        return rng.binomial(self.blocks_per_epoch, p) / self.blocks_per_epoch
