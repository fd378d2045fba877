"""Closed-loop replay, the frozen calibration bundle and ensemble sweeps."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detect import (
    CalibrationRecord,
    DetectorConfig,
    DetectorState,
    StreamingFrontEnd,
    calibrate_detector,
    configure_from_calibration,
)
from .errors import (
    BundleExists,
    BundleTampered,
    ConfigError,
    DataError,
    EmptyGate,
    GridMismatch,
    MissingBundle,
    SeriesTooShort,
)
from .estimator import KalmanFilter, NoiseConfig, horizon_process_cov, kf_init
from .phy import (
    BlerAnchor,
    LinkEmulator,
    McsLadder,
    available_extra_margin,
    bler,
    binned_pairs,
    fit_bler_anchor,
    margin_threshold,
)
from .policies import ControlConfig, Policy, PolicyDecision, PolicyInput, make_policy
from .risk import MarginModel, calibrate_offset_c
from .scenario import CALIBRATION_EVENT, REFERENCE_PEAK_TECU, ScenarioConfig, Trace, build_scenario, event_flux, quiet_trace
from .stats import PairedSeries, gated_subset, holm_adjusted, holm_bonferroni, moving_block_bootstrap, worst_window

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "t_s", "y_rad", "z_norm", "detected", "dvtec_hat", "dvtec_rate_hat", "bias_hat", "p11", "nis",
    "m_req_db", "m_avail_db", "m_eff_db", "p_out", "mcs_index", "r_bpshz", "eta", "bler", "goodput_bpshz",
)  # fmt: skip
DEFAULT_GATES = (0.2, 0.3, 0.4)
ENSEMBLE_A_SCALE = (3.6, 6.0, 8.4)  # peak dVTEC, TECU
ENSEMBLE_ELEVATION = (30.0, 40.0, 50.0)
ENSEMBLE_CN0 = (49.0, 52.0, 55.0)
ENSEMBLE_EVENTS = ("impulsive", "double", "long")
TAU_HP_SWEEP = (300.0, 600.0, 900.0, 1200.0)
CALIBRATION_PEAK_TECU = 6.0  # mid-grid amplitude so the no-adapt replay spans the BLER transition
PRE_EVENT_S = 300.0
WARMUP_S = 60.0
_SQRT1_2 = 1.0 / math.sqrt(2.0)


# -- calibration bundle -------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class CalibrationBundle:
    """Everything frozen by ``calibrate``; read-only afterwards."""

    detector: DetectorConfig
    detectors: dict[str, CalibrationRecord]  # keyed by tau_hp in seconds
    margin: MarginModel
    anchor: BlerAnchor
    ladder: McsLadder
    control: ControlConfig
    noise: NoiseConfig
    scenario: ScenarioConfig
    meta: dict = field(default_factory=dict)
    sha256: str = ""

    @property
    def record(self) -> CalibrationRecord:
        return self.detectors[_tau_key(self.detector.tau_hp_s)]

    def detector_for(self, tau_hp_s: float | None = None) -> tuple[DetectorConfig, CalibrationRecord]:
        tau = self.detector.tau_hp_s if tau_hp_s is None else tau_hp_s
        key = _tau_key(tau)
        if key not in self.detectors:
            raise ConfigError(f"bundle holds no detector calibration for tau_hp={tau} s (have {sorted(self.detectors)})")
        rec = self.detectors[key]
        return configure_from_calibration(replace(self.detector, tau_hp_s=tau), rec), rec

    def content(self) -> dict:
        return {
            "detector": asdict(self.detector),
            "detectors": {k: v.to_dict() for k, v in self.detectors.items()},
            "margin": self.margin.to_dict(),
            "anchor": self.anchor.to_dict(),
            "ladder": self.ladder.to_dict(),
            "control": self.control.to_dict(),
            "noise": {"q1": self.noise.q1, "q2": self.noise.q2, "q3": self.noise.q3, "q4": self.noise.q4},
            "scenario": self.scenario.to_dict(),
            "meta": self.meta,
        }

    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.content()).encode()).hexdigest()

    def save(self, path, overwrite: bool = False) -> str:
        path = Path(path)
        if path.exists() and not overwrite:
            raise BundleExists(f"{path} already holds a frozen calibration")
        self.sha256 = self.digest()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"content": self.content(), "sha256": self.sha256}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return self.sha256

    @classmethod
    def load(cls, path) -> "CalibrationBundle":
        path = Path(path)
        if not path.exists():
            raise MissingBundle(f"no calibration bundle at {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            content, stored = doc["content"], doc["sha256"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise BundleTampered(f"{path} is not a readable calibration bundle: {exc}") from exc
        actual = hashlib.sha256(_canonical(content).encode()).hexdigest()
        if actual != stored:
            raise BundleTampered(f"{path} content hash {actual[:12]} does not match the frozen {stored[:12]}")
        try:
            b = cls(
                DetectorConfig(**content["detector"]),
                {k: CalibrationRecord.from_dict(v) for k, v in content["detectors"].items()},
                MarginModel.from_dict(content["margin"]),
                BlerAnchor.from_dict(content["anchor"]),
                McsLadder.from_dict(content["ladder"]),
                ControlConfig.from_dict(content["control"]),
                NoiseConfig(**content["noise"]),
                ScenarioConfig.from_dict(content["scenario"]),
                content.get("meta", {}),
                stored,
            )
        except (KeyError, TypeError) as exc:
            raise BundleTampered(f"{path} does not match the bundle layout: {exc}") from exc
        return b


def _tau_key(tau: float) -> str:
    return f"{float(tau):g}"


# -- per-epoch loop ---------------------------------------------------------------


class SensingChain:
    """read -> high-pass/matched filter -> latch -> KF -> horizon risk, one epoch at a time."""

    def __init__(self, bundle: CalibrationBundle, k_eff: float, cn0_dbhz: float, dt_s: float, tau_hp_s: float | None = None):
        det_cfg, rec = bundle.detector_for(tau_hp_s)
        if abs(det_cfg.dt_s - dt_s) > 1e-12:
            raise GridMismatch(f"trace rate {dt_s} s differs from the calibrated {det_cfg.dt_s} s")
        self.front = StreamingFrontEnd(det_cfg, rec.sigma_pre)
        self.latch = DetectorState(det_cfg.z_hi, det_cfg.z_lo)
        noise = replace(bundle.noise, r_var=1.0 / (10.0 ** (cn0_dbhz / 10.0) * dt_s))
        self.kf = KalmanFilter(kf_init(), dt_s, k_eff, noise)
        self.model = bundle.margin
        self.k_eff = k_eff
        self.kappa_k2 = self.model.kappa * k_eff * k_eff
        self.H = bundle.control.H_s
        self.Q_H = horizon_process_cov(self.H, dt_s, noise)
        self.m_avail_home = available_extra_margin(bundle.ladder.rate_of(bundle.control.home_index), bundle.ladder)

    def step(self, y: float):
        """Returns (u, z_norm, detected, m_req, mu_req, sigma_req, p_out)."""
        u, z = self.front.step(y)
        detected = self.latch.update(z)
        kf = self.kf.step(y)
        x, P = kf.x, kf.P
        md = self.model
        m_req = md.m0 + md.k1 * max(x[0], 0.0) + md.k2 * abs(x[1]) + 10.0 * math.log10(1.0 + self.kappa_k2 * max(P[0, 0], 0.0))
        # horizon moments of (dVTEC, rate) under the constant-velocity model
        H, Q = self.H, self.Q_H
        mu1 = x[0] + H * x[1]
        mu2 = x[1]
        p11 = P[0, 0] + 2.0 * H * P[0, 1] + H * H * P[1, 1] + Q[0, 0]
        p12 = P[0, 1] + H * P[1, 1] + Q[0, 1]
        p22 = P[1, 1] + Q[1, 1]
        mu_req = md.m0 + md.k1 * max(mu1, 0.0) + md.k2 * abs(mu2) + 10.0 * math.log10(1.0 + self.kappa_k2 * p11)
        g1 = md.k1 if mu1 > 0 else 0.0
        g2 = md.k2 if mu2 > 0 else -md.k2 if mu2 < 0 else 0.0
        sigma = math.sqrt(max(g1 * g1 * p11 + 2.0 * g1 * g2 * p12 + g2 * g2 * p22, 0.0))
        arg = mu_req - self.m_avail_home - md.c_offset
        if sigma > 0:
            p_out = 0.5 * math.erfc(-arg / sigma * _SQRT1_2)
        else:
            p_out = 1.0 if arg > 0 else 0.0 if arg < 0 else 0.5
        return u, z, detected, m_req, mu_req, sigma, p_out


@dataclass
class ReplayLog:
    policy: str
    columns: dict[str, np.ndarray]
    epoch_ns: np.ndarray | None = None
    transitions: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.columns["t_s"])

    def __getitem__(self, key) -> np.ndarray:
        return self.columns[key]

    def timing(self) -> dict:
        if self.epoch_ns is None or not len(self.epoch_ns):
            return {}
        ms = self.epoch_ns / 1e6
        return {"median_ms": float(np.median(ms)), "mean_ms": float(np.mean(ms)), "p99_ms": float(np.percentile(ms, 99))}

    def to_csv(self, path) -> None:
        cols = [self.columns[c] for c in LOG_COLUMNS]
        ints = {"detected", "mcs_index"}
        fmt = [(lambda v: str(int(v))) if c in ints else (lambda v: f"{v:.1f}") if c == "t_s" else repr for c in LOG_COLUMNS]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in zip(*cols):
                w.writerow([f(float(v)) if f is repr else f(v) for f, v in zip(fmt, row)])

    @classmethod
    def from_csv(cls, path, policy: str = "") -> "ReplayLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path} is empty") from None
            missing = [c for c in LOG_COLUMNS if c not in header]
            if missing:
                raise DataError(f"{path} lacks columns {missing}")
            rows = [r for r in reader if r]
        if not rows:
            raise DataError(f"{path} holds no epochs")
        data = np.array(rows, dtype=float)
        return cls(policy or Path(path).stem, {c: data[:, i] for i, c in enumerate(header)})


def truth_required_margin(trace: Trace, model: MarginModel) -> np.ndarray:
    """Required margin from the true dVTEC and rate, no estimation penalty."""
    return model.m0 + model.k1 * np.clip(trace.truth_dvtec_tecu, 0.0, None) + model.k2 * np.abs(trace.truth_rate_tecu_s)


def replay(
    trace: Trace,
    bundle: CalibrationBundle,
    policies: Sequence[str] = ("no-adapt",),
    cn0_dbhz: float | None = None,
    tau_hp_s: float | None = None,
    timing: bool = True,
) -> dict[str, ReplayLog]:
    """Run the sensing chain once per epoch and every policy in lockstep.

    A decision taken at epoch k is applied (and scored) at epoch k+1. Scoring
    uses the sensed required margin, the policy's available margin and the
    frozen BLER anchor, so all policies share one scoring pipeline.
    """
    cn0 = bundle.scenario.cn0_dbhz if cn0_dbhz is None else cn0_dbhz
    dt = trace.dt_s
    chain = SensingChain(bundle, trace.k_eff, cn0, dt, tau_hp_s)
    if tau_hp_s is not None:
        det_cfg, _ = bundle.detector_for(tau_hp_s)
        control = bundle.control.with_thresholds(det_cfg.z_hi, det_cfg.z_lo)
    else:
        control = bundle.control
    ladder, anchor = bundle.ladder, bundle.anchor
    pols: list[Policy] = [make_policy(p, control, ladder, anchor, bundle.margin, dt, trace.k_eff) for p in policies]
    decisions: list[PolicyDecision] = [p.initial() for p in pols]
    m_avail_of = {e.index: available_extra_margin(e.r_bpshz, ladder) for e in ladder.entries}
    delta_m = control.delta_m_db

    n = len(trace)
    shared = {c: np.empty(n) for c in ("t_s", "y_rad", "z_norm", "detected", "dvtec_hat", "dvtec_rate_hat", "bias_hat", "p11", "nis", "m_req_db", "p_out")}
    own = [{c: np.empty(n) for c in ("m_avail_db", "m_eff_db", "mcs_index", "r_bpshz", "eta", "bler", "goodput_bpshz")} for _ in pols]
    epoch_ns = np.empty(n, dtype=np.int64) if timing else None
    clock = time.perf_counter_ns
    t_arr, y_arr = trace.t_s, trace.y_rad

    for k in range(n):
        t0 = clock() if timing else 0
        t = float(t_arr[k])
        y = float(y_arr[k])
        u, z, detected, m_req, mu_req, sigma, p_out = chain.step(y)
        kf = chain.kf
        inp = PolicyInput(t, z, u, detected, m_req, p_out)
        for j, pol in enumerate(pols):
            d = decisions[j]
            m_avail = m_avail_of[d.mcs_index]
            m_eff = m_avail - m_req + (delta_m if d.soften else 0.0)
            b = bler(m_eff, anchor)
            col = own[j]
            col["m_avail_db"][k] = m_avail
            col["m_eff_db"][k] = m_eff
            col["mcs_index"][k] = d.mcs_index
            col["r_bpshz"][k] = d.r_bpshz
            col["eta"][k] = d.eta
            col["bler"][k] = b
            col["goodput_bpshz"][k] = (1.0 - d.eta) * (1.0 - b) * d.r_bpshz
            decisions[j] = pol.step(inp)
        if timing:
            epoch_ns[k] = clock() - t0
        x = kf.x
        shared["t_s"][k] = t
        shared["y_rad"][k] = y
        shared["z_norm"][k] = z
        shared["detected"][k] = detected
        shared["dvtec_hat"][k] = x[0]
        shared["dvtec_rate_hat"][k] = x[1]
        shared["bias_hat"][k] = x[2]
        shared["p11"][k] = kf.P[0, 0]
        shared["nis"][k] = kf.nis
        shared["m_req_db"][k] = m_req
        shared["p_out"][k] = p_out

    meta = {"bundle_sha256": bundle.sha256, "k_eff": trace.k_eff, "cn0_dbhz": cn0, "dt_s": dt, "t0_s": trace.t0_s}
    out = {}
    for pol, col in zip(pols, own):
        out[pol.name] = ReplayLog(pol.name, shared | col, epoch_ns, list(pol.transitions), dict(meta, policy=pol.name))
    return out


# -- calibration --------------------------------------------------------------------


def pre_event_slice(t_s: np.ndarray, t0_s: float, pre_s: float = PRE_EVENT_S, warmup_s: float = WARMUP_S) -> slice:
    start = t0_s - pre_s
    if start < warmup_s:
        raise SeriesTooShort(f"pre-event interval starting at {start} s overlaps the {warmup_s} s warm-up")
    k0 = int(np.searchsorted(t_s, start - 1e-9))
    k1 = int(np.searchsorted(t_s, t0_s - 1e-9))
    return slice(k0, k1)


def calibrate(
    scenario: ScenarioConfig | None = None,
    seed: int = 0,
    detector: DetectorConfig | None = None,
    tau_hp_list: Sequence[float] = (),
    control: ControlConfig | None = None,
    margin: MarginModel | None = None,
    ladder: McsLadder | None = None,
    emulator: LinkEmulator | None = None,
) -> CalibrationBundle:
    """Lock the detector, BLER anchor and outage offset on no-event + calibration-event logs.

    The quiet log holds N_b windows after the matched-filter warm-up; the BLER
    anchor is fitted to a no-adapt replay of the calibration event scored by a
    link emulator, and c is set on that replay's pre-event interval.
    """
    scenario = scenario or ScenarioConfig()
    detector = detector or DetectorConfig(dt_s=scenario.dt_s)
    control = control or ControlConfig()
    margin = margin or MarginModel()
    ladder = ladder or McsLadder()
    emulator = emulator or LinkEmulator()
    if margin.c_frozen:
        raise ConfigError("margin model is already frozen")
    ss = np.random.SeedSequence(seed)
    seed_quiet, seed_event, seed_link = (int(s.generate_state(1)[0]) for s in ss.spawn(3))

    t_cal = detector.n_blocks * detector.window_s
    quiet = quiet_trace(scenario.with_(rng_seed=seed_quiet), t_cal + detector.window_s)
    taus = sorted({float(detector.tau_hp_s), *map(float, tau_hp_list)})
    records = {_tau_key(t): calibrate_detector(quiet.y_rad, replace(detector, tau_hp_s=t)) for t in taus}
    rec = records[_tau_key(detector.tau_hp_s)]
    det_cfg = configure_from_calibration(detector, rec)
    control = control.with_thresholds(det_cfg.z_hi, det_cfg.z_lo)

    # provisional bundle: anchor and c are not used by the sensing branch of a no-adapt replay
    provisional = CalibrationBundle(det_cfg, records, margin, BlerAnchor(), ladder, control, NoiseConfig(), scenario)
    ev = build_scenario(
        event_flux(CALIBRATION_EVENT),
        scenario.with_(rng_seed=seed_event, amplitude_scale=CALIBRATION_PEAK_TECU / REFERENCE_PEAK_TECU),
    )
    chain = SensingChain(provisional, ev.k_eff, scenario.cn0_dbhz, ev.dt_s)
    n = len(ev)
    m_req = np.empty(n)
    mu_req = np.empty(n)
    sigma = np.empty(n)
    for k in range(n):
        _, _, _, m_req[k], mu_req[k], sigma[k], _ = chain.step(float(ev.y_rad[k]))

    sl = pre_event_slice(ev.t_s, ev.t0_s)
    m_avail = chain.m_avail_home
    forecasts = np.column_stack([mu_req[sl], sigma[sl], np.full(sl.stop - sl.start, m_avail)])
    c = calibrate_offset_c(forecasts, margin)

    t_warm = ev.t_s >= WARMUP_S
    m_eff_sensed = (m_avail - m_req)[t_warm]
    m_eff_true = (m_avail - truth_required_margin(ev, margin))[t_warm]
    emp = emulator.empirical_bler(m_eff_true, np.random.default_rng(seed_link))
    pairs = binned_pairs(m_eff_sensed, emp)
    anchor = fit_bler_anchor(pairs)

    meta = {
        "seed": seed,
        "t_cal_s": t_cal,
        "quiet_log_s": t_cal + detector.window_s,
        "calibration_event": CALIBRATION_EVENT,
        "calibration_peak_tecu": CALIBRATION_PEAK_TECU,
        "pre_event_s": [float(ev.t_s[sl.start]), float(ev.t_s[sl.stop - 1])],
        "c_offset_db": c,
        "anchor_pairs": len(pairs),
        "m_beta_db": margin_threshold(control.target_bler, anchor),
    }
    log.info("calibrated: threshold %.3f, sigma_pre %.4g, c %.3f dB, anchor k %.3f m_piv %.3f", rec.threshold, rec.sigma_pre, c, anchor.k_slope, anchor.m_piv_db)
    b = CalibrationBundle(det_cfg, records, margin, anchor, ladder, control, NoiseConfig(), scenario, meta)
    b.sha256 = b.digest()
    return b


# -- evaluation ---------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    comparison: str
    metric: str
    gate: str
    n: int
    mean: float
    ci_low: float
    ci_high: float
    p_raw: float
    p_holm: float
    reject_holm: bool
    cohens_d: float


RESULT_COLUMNS = ("comparison", "metric", "gate", "n", "mean", "ci_low", "ci_high", "p_raw", "p_holm", "reject_holm", "cohens_d")


def paired_deltas(adapt: ReplayLog, base: ReplayLog) -> dict[str, PairedSeries]:
    """dBLER = BLER_base - BLER_adapt and dT = T_adapt - T_base."""
    t_a, t_b = adapt["t_s"], base["t_s"]
    if len(t_a) != len(t_b) or not np.allclose(t_a, t_b, atol=1e-6):
        raise GridMismatch("logs do not share a time grid")
    return {
        "dBLER": PairedSeries(t_a, base["bler"] - adapt["bler"]),
        "dT": PairedSeries(t_a, adapt["goodput_bpshz"] - base["goodput_bpshz"]),
    }


def evaluate(
    adapt: ReplayLog,
    base: ReplayLog,
    gates: Sequence[float] = DEFAULT_GATES,
    block_len_s: float = 12.0,
    B: int = 2000,
    seed: int = 0,
    alpha: float = 0.05,
) -> tuple[list[ResultRow], dict]:
    """Full-timeline and gated paired outcomes with Holm correction over the gates.

    The gate is the baseline log's endpoint outage, which is policy-independent.
    """
    deltas = paired_deltas(adapt, base)
    comp = f"{adapt.policy} vs {base.policy}"
    p_out = base["p_out"]
    rows: list[ResultRow] = []
    for metric, series in deltas.items():
        full = moving_block_bootstrap(series, block_len_s, B, seed)
        rows.append(ResultRow(comp, metric, "full", len(series), full.mean, full.ci_low, full.ci_high, full.p_value, full.p_value, full.p_value <= alpha, full.cohens_d))
        gated = []
        for tau in gates:
            try:
                sub = gated_subset(series, p_out, tau)
                res = moving_block_bootstrap(sub, block_len_s, B, seed)
                gated.append((tau, len(sub), res))
            except (EmptyGate, SeriesTooShort) as exc:
                log.warning("gate %.2f skipped: %s", tau, exc)
                gated.append((tau, 0, None))
        live = [g for g in gated if g[2] is not None]
        if live:
            p = [g[2].p_value for g in live]
            rej, _ = holm_bonferroni(p, alpha)
            adj = holm_adjusted(p)
        for tau, n_sub, res in gated:
            if res is None:
                nan = float("nan")
                rows.append(ResultRow(comp, metric, f"p_out>{tau:g}", 0, nan, nan, nan, nan, nan, False, nan))
                continue
            i = [g[0] for g in live].index(tau)
            rows.append(ResultRow(comp, metric, f"p_out>{tau:g}", n_sub, res.mean, res.ci_low, res.ci_high, res.p_value, adj[i], rej[i], res.cohens_d))
    ww_base = worst_window(base["bler"], p_out, 60.0, float(np.median(np.diff(base["t_s"]))), base["t_s"])
    ww_adapt = worst_window(adapt["bler"], p_out, 60.0, float(np.median(np.diff(base["t_s"]))), base["t_s"])
    peak_b = ww_base["mean_metric"]
    worst = {
        "start_s": ww_base["start_s"],
        "centre_s": ww_base["centre_s"],
        "bler_base": peak_b,
        "bler_adapt": ww_adapt["mean_metric"],
        "peak_bler_reduction": (peak_b - ww_adapt["mean_metric"]) / peak_b if peak_b > 0 else float("nan"),
    }
    return rows, worst


def write_results(rows: Sequence[ResultRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else f"{getattr(r, c):.6g}" for c in RESULT_COLUMNS])


# -- ensemble ---------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleRow:
    a_scale: float
    elevation_deg: float
    cn0_dbhz: float
    tau_hp_s: float
    dT_mean: float
    dT_std: float
    dBLER_mean: float
    dBLER_std: float
    n_events: int


ENSEMBLE_COLUMNS = ("a_scale", "elevation_deg", "cn0_dbhz", "tau_hp_s", "dT_mean", "dT_std", "dBLER_mean", "dBLER_std", "n_events")


def event_trace(event: str, scenario: ScenarioConfig, a_scale_tecu: float, elevation_deg: float, cn0_dbhz: float, seed: int) -> Trace:
    cfg = scenario.with_(
        amplitude_scale=a_scale_tecu / REFERENCE_PEAK_TECU, cn0_dbhz=cn0_dbhz, rng_seed=seed, geo_elevation_deg=elevation_deg
    )
    return build_scenario(event_flux(event), cfg)


def cell_seed(base_seed: int, *key) -> int:
    """Stable per-cell seed; identical noise realisations are shared across policies."""
    h = hashlib.sha256(_canonical([base_seed, *key]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def ensemble(
    bundle: CalibrationBundle,
    a_scales: Sequence[float] = ENSEMBLE_A_SCALE,
    elevations: Sequence[float] = ENSEMBLE_ELEVATION,
    cn0s: Sequence[float] = ENSEMBLE_CN0,
    events: Sequence[str] = ENSEMBLE_EVENTS,
    tau_hp_list: Sequence[float | None] = (None,),
    policy: str = "adapt-1+2",
    baseline: str = "no-adapt",
    seed: int = 0,
    common_noise: bool = True,
    progress=None,
) -> list[EnsembleRow]:
    """Cross-product replay; each row is mean/std over events of full-timeline deltas.

    With ``common_noise`` the noise seed depends on the event only, so cells of
    one event differ only by the swept parameter.
    """
    rows = []
    for tau, a, eps, cn0 in itertools.product(tau_hp_list, a_scales, elevations, cn0s):
        d_t, d_b = [], []
        for ev in events:
            key = (ev,) if common_noise else (ev, a, eps, cn0)
            tr = event_trace(ev, bundle.scenario, a, eps, cn0, cell_seed(seed, *key))
            logs = replay(tr, bundle, (baseline, policy), cn0_dbhz=cn0, tau_hp_s=tau, timing=False)
            base, ad = logs[baseline], logs[policy]
            d_t.append(float(np.mean(ad["goodput_bpshz"] - base["goodput_bpshz"])))
            d_b.append(float(np.mean(base["bler"] - ad["bler"])))
        tau_v = bundle.detector.tau_hp_s if tau is None else float(tau)
        sd = (lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
        row = EnsembleRow(a, eps, cn0, tau_v, float(np.mean(d_t)), sd(d_t), float(np.mean(d_b)), sd(d_b), len(events))
        rows.append(row)
        if progress:
            progress(row)
    return rows


def write_ensemble(rows: Sequence[EnsembleRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENSEMBLE_COLUMNS)
        for r in rows:
            w.writerow([f"{getattr(r, c):.6g}" if isinstance(getattr(r, c), float) else getattr(r, c) for c in ENSEMBLE_COLUMNS])


def save_log_meta(log_: ReplayLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(log_.meta | {"timing": log_.timing(), "transitions": log_.transitions}, fh, indent=1, sort_keys=True)
        fh.write("\n")
