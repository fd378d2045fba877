"""Risk-gated discrete controller and the comparison baselines.

Every policy consumes the same per-epoch sensing record and returns the
(MCS, pilot fraction, softening) triple to apply at the next epoch. Scoring
lives in the pipeline and is shared by all policies.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, replace

from .errors import ConfigError, UnknownPolicy
from .phy import BlerAnchor, McsLadder, available_extra_margin, margin_threshold
from .risk import MarginModel, uncertainty_penalty

HOME_INDEX = 4  # MCS-4, 5.0 bps/Hz


@dataclass(frozen=True)
class ControlConfig:
    eta_min: float = 0.15
    eta_max: float = 0.30
    m_sat_db: float = 3.0
    dwell_min_s: float = 10.0
    z_hi: float = 2.685
    z_lo: float = 1.985
    tau_gate: float = 0.3
    H_s: float = 60.0
    delta_m_db: float = 0.5
    eta_mode: str = "fixed"  # "fixed" | "shared-law"
    eta0: float | None = None  # None: pilot law evaluated at m0
    target_bler: float = 0.10
    slope_window_s: float = 1.0
    home_index: int = HOME_INDEX
    # baseline tuning
    m_safe_db: float = 3.0
    reactive_avg_s: float = 10.0
    reactive_down_db: float = 0.0
    reactive_up_db: float = 1.0
    acm_smooth_s: float = 10.0
    acm_hold_s: float = 45.0
    pred_avg_s: float = 10.0
    pred_hysteresis_db: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta_min <= self.eta_max <= 1.0:
            raise ConfigError("need 0 <= eta_min <= eta_max <= 1")
        if self.dwell_min_s < 0 or self.acm_hold_s < 0:
            raise ConfigError("dwell times must be non-negative")
        if not 0.0 < self.tau_gate < 1.0:
            raise ConfigError("tau_gate must lie in (0, 1)")
        if self.eta_mode not in ("fixed", "shared-law"):
            raise ConfigError(f"unknown eta_mode {self.eta_mode!r}")
        if self.z_lo > self.z_hi:
            raise ConfigError("z_lo must not exceed z_hi")
        if self.m_sat_db <= 0 or self.H_s <= 0:
            raise ConfigError("m_sat and H must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ControlConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_thresholds(self, z_hi: float, z_lo: float) -> "ControlConfig":
        return replace(self, z_hi=z_hi, z_lo=z_lo)


@dataclass(frozen=True)
class PolicyInput:
    """What a policy may look at for epoch k."""

    t_s: float
    z_norm: float
    u_hp: float
    detected: bool
    m_req_db: float
    p_out: float


@dataclass(frozen=True)
class PolicyDecision:
    mcs_index: int
    r_bpshz: float
    eta: float
    gated: bool = False
    detected: bool = False
    m_req_db: float = float("nan")
    p_out: float = float("nan")
    soften: bool = False


# -- control laws -----------------------------------------------------------------


def required_margin_now(x_hat, p11: float, k_eff: float, model: MarginModel) -> float:
    """m0 + k1 [dVTEC]^+ + k2 |rate| + penalty on the current P11, dB."""
    return (
        model.m0
        + model.k1 * max(float(x_hat[0]), 0.0)
        + model.k2 * abs(float(x_hat[1]))
        + uncertainty_penalty(max(p11, 0.0), k_eff, model)
    )


def schedule_rate(m_req_db: float, ladder: McsLadder) -> tuple[float, float, int]:
    """Clipped linear rate law, floor-quantised to the ladder.

    Returns (r_continuous, r_quantized, mcs_index).
    """
    if not math.isfinite(m_req_db):
        raise ValueError("m_req must be finite")
    r_cont = min(max(ladder.r_max - ladder.k_r * m_req_db, ladder.r_min), ladder.r_max)
    entry = ladder.entries[0]
    for e in ladder.entries:
        if e.r_bpshz <= r_cont + 1e-12:
            entry = e
    return r_cont, entry.r_bpshz, entry.index


def pilot_fraction(m_req_db: float, cfg: ControlConfig) -> float:
    """Saturating pilot law; negative margins count as zero."""
    m = max(m_req_db, 0.0)
    return cfg.eta_min + m / (m + cfg.m_sat_db) * (cfg.eta_max - cfg.eta_min)


def fixed_pilot(cfg: ControlConfig, model: MarginModel) -> float:
    return pilot_fraction(model.m0, cfg) if cfg.eta0 is None else cfg.eta0


class PilotSchedule:
    """Pilot fraction common to every policy in a comparison."""

    def __init__(self, cfg: ControlConfig, model: MarginModel, ladder: McsLadder, m_beta_db: float):
        self.cfg = cfg
        self.eta0 = fixed_pilot(cfg, model)
        self.m_avail_rmin = available_extra_margin(ladder.r_min, ladder)
        self.m_beta = m_beta_db

    def __call__(self, m_req_db: float) -> float:
        if self.cfg.eta_mode == "fixed":
            return self.eta0
        if self.m_avail_rmin - m_req_db < self.m_beta:
            # even r_min misses the target: saturate to the (r_min, eta_max) corner
            return self.cfg.eta_max
        return pilot_fraction(m_req_db, self.cfg)


class McsStateMachine:
    """One-step MCS switching with dwell and z_norm hysteresis.

    Down one rung needs z >= z_hi, a rising z (over the slope window) and
    p_out > tau_gate; up one rung (never above home) needs z < z_lo. Either
    transition needs the dwell time elapsed since the previous one.
    """

    def __init__(self, cfg: ControlConfig, ladder: McsLadder, home_index: int | None = None):
        self.cfg = cfg
        self.ladder = ladder
        self.home = cfg.home_index if home_index is None else home_index
        ladder.rate_of(self.home)
        self.index = self.home
        self.last_switch_s = -math.inf
        self.transitions: list[tuple[float, int, int]] = []

    def update(self, z_norm: float, z_slope: float, p_out: float, clock_s: float, candidate_index: int | None = None) -> int:
        if clock_s - self.last_switch_s < self.cfg.dwell_min_s:
            return self.index
        new = self.index
        if z_norm >= self.cfg.z_hi and z_slope > 0 and p_out > self.cfg.tau_gate:
            new = self.ladder.step(self.index, -1)
        elif z_norm < self.cfg.z_lo and self.index < self.home:
            target = self.home if candidate_index is None else min(max(candidate_index, self.index), self.home)
            if target > self.index:
                new = self.ladder.step(self.index, +1)
        if new != self.index:
            self.transitions.append((clock_s, self.index, new))
            self.index = new
            self.last_switch_s = clock_s
        return self.index


class _Smoother:
    """Trailing moving average over a fixed number of samples."""

    def __init__(self, n: int):
        self.buf: deque[float] = deque(maxlen=max(int(n), 1))
        self.total = 0.0

    def push(self, v: float) -> float:
        if len(self.buf) == self.buf.maxlen:
            self.total -= self.buf[0]
        self.buf.append(v)
        self.total += v
        return self.total / len(self.buf)


# -- policies ---------------------------------------------------------------------


class Policy:
    name = "base"

    def __init__(self, cfg: ControlConfig, ladder: McsLadder, anchor: BlerAnchor, model: MarginModel, dt_s: float, k_eff: float):
        self.cfg = cfg
        self.ladder = ladder
        self.anchor = anchor
        self.model = model
        self.dt = dt_s
        self.k_eff = k_eff
        self.m_beta = margin_threshold(cfg.target_bler, anchor)
        self.pilots = PilotSchedule(cfg, model, ladder, self.m_beta)
        self.index = cfg.home_index
        self.transitions: list[tuple[float, int, int]] = []

    def initial(self) -> PolicyDecision:
        idx = self.cfg.home_index
        return PolicyDecision(idx, self.ladder.rate_of(idx), self.pilots(self.model.m0))

    def _index(self, inp: PolicyInput) -> int:
        return self.index

    def _soften(self, inp: PolicyInput) -> bool:
        return False

    def step(self, inp: PolicyInput) -> PolicyDecision:
        """Decision to apply at the next epoch."""
        idx = self._index(inp)
        if idx != self.index:
            self.transitions.append((inp.t_s, self.index, idx))
            self.index = idx
        gated = inp.p_out > self.cfg.tau_gate
        return PolicyDecision(
            idx,
            self.ladder.rate_of(idx),
            self.pilots(inp.m_req_db),
            gated,
            inp.detected,
            inp.m_req_db,
            inp.p_out,
            self._soften(inp),
        )


class NoAdapt(Policy):
    name = "no-adapt"


class Adapt1(Policy):
    """Fixed MCS-4 with a one-time redundancy shift while detected and gated."""

    name = "adapt-1"

    def _soften(self, inp):
        return inp.detected and inp.p_out > self.cfg.tau_gate


class Adapt12(Adapt1):
    """Adapt-1 plus the gated one-step MCS down-switch."""

    name = "adapt-1+2"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.sm = McsStateMachine(self.cfg, self.ladder)
        self.z_hist: deque[float] = deque(maxlen=max(int(round(self.cfg.slope_window_s / self.dt)), 1) + 1)

    def _index(self, inp):
        self.z_hist.append(inp.z_norm)
        slope = self.z_hist[-1] - self.z_hist[0] if len(self.z_hist) == self.z_hist.maxlen else 0.0
        _, _, cand = schedule_rate(inp.m_req_db, self.ladder)
        return self.sm.update(inp.z_norm, slope, inp.p_out, inp.t_s, cand)


class _DwellLadder(Policy):
    """Shared plumbing for baselines that walk the ladder one rung at a time."""

    hold_s = 0.0

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.last_switch_s = -math.inf

    def _want(self, inp) -> int:
        raise NotImplementedError

    def _index(self, inp):
        want = self._want(inp)
        if want == 0 or inp.t_s - self.last_switch_s < self.hold_s:
            return self.index
        self.last_switch_s = inp.t_s
        return self.ladder.step(self.index, want)

    def _margin_gap(self, m_req: float, idx: int) -> float:
        return available_extra_margin(self.ladder.rate_of(idx), self.ladder) - m_req


class ReactiveAverage(_DwellLadder):
    """Moving average of the measured margin against fixed down/up levels."""

    name = "reactive-average"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.hold_s = self.cfg.dwell_min_s
        self.avg = _Smoother(round(self.cfg.reactive_avg_s / self.dt))

    def _smoothed(self, inp):
        return self.avg.push(inp.m_req_db)

    def _want(self, inp):
        m_req = self._smoothed(inp)
        if self._margin_gap(m_req, self.index) < self.cfg.reactive_down_db:
            return -1 if self.index != self.ladder.indices[0] else 0
        up = self.ladder.step(self.index, +1)
        if up != self.index and self._margin_gap(m_req, up) > self.cfg.reactive_up_db:
            return +1
        return 0


class ReactiveAcm(ReactiveAverage):
    """Hysteretic ACM on an exponentially smoothed margin with a long hold."""

    name = "reactive-ACM"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.hold_s = self.cfg.acm_hold_s
        self.alpha = self.dt / (self.cfg.acm_smooth_s + self.dt)
        self.ewma = None

    def _smoothed(self, inp):
        self.ewma = inp.m_req_db if self.ewma is None else self.ewma + self.alpha * (inp.m_req_db - self.ewma)
        return self.ewma


class FixedSafety(_DwellLadder):
    """Rate law driven by the required margin plus a constant reserve."""

    name = "fixed-safety"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.hold_s = self.cfg.dwell_min_s

    def _want(self, inp):
        _, _, cand = schedule_rate(inp.m_req_db + self.cfg.m_safe_db, self.ladder)
        return (cand > self.index) - (cand < self.index)


class PredictionOnly(_DwellLadder):
    """Open-loop trend extrapolation of the front-end statistic, no outage gate."""

    name = "prediction-only"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.hold_s = self.cfg.acm_hold_s
        n = round(self.cfg.pred_avg_s / self.dt)
        self.z_avg = _Smoother(n)
        self.s_avg = _Smoother(n)
        self.z_hist: deque[float] = deque(maxlen=max(int(round(self.cfg.slope_window_s / self.dt)), 1) + 1)
        self.u_prev = 0.0

    def _want(self, inp):
        z_ma = self.z_avg.push(inp.z_norm)
        s_h = self.s_avg.push(abs(inp.u_hp - self.u_prev))
        self.u_prev = inp.u_hp
        self.z_hist.append(z_ma)
        z_dot = (self.z_hist[-1] - self.z_hist[0]) / self.cfg.slope_window_s if len(self.z_hist) == self.z_hist.maxlen else 0.0
        mu_req = self.model.m0 + self.model.k1 * (z_ma + z_dot * self.cfg.H_s) + self.model.k2 * s_h
        if self._margin_gap(mu_req, self.index) < self.m_beta:
            return -1 if self.index != self.ladder.indices[0] else 0
        up = self.ladder.step(self.index, +1)
        if up != self.index and self.index < self.cfg.home_index and self._margin_gap(mu_req, up) >= self.m_beta + self.cfg.pred_hysteresis_db:
            return +1
        return 0


POLICIES: dict[str, type[Policy]] = {
    cls.name: cls for cls in (NoAdapt, Adapt1, Adapt12, ReactiveAverage, FixedSafety, ReactiveAcm, PredictionOnly)
}


def make_policy(name: str, cfg: ControlConfig, ladder: McsLadder, anchor: BlerAnchor, model: MarginModel, dt_s: float, k_eff: float) -> Policy:
    try:
        cls = POLICIES[name]
    except KeyError:
        raise UnknownPolicy(f"unknown policy {name!r}; known: {sorted(POLICIES)}") from None
    return cls(cfg, ladder, anchor, model, dt_s, k_eff)
