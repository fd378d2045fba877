"""Command-line entry point: calibrate, synthesize, replay, evaluate, ensemble.

Exit codes: 0 success, 2 configuration error, 3 frozen-protocol violation,
4 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BundleExists, ConfigError, DataError, FrozenProtocolError, IonolinkError, UnknownPolicy
from .pipeline import (
    DEFAULT_GATES,
    ENSEMBLE_A_SCALE,
    ENSEMBLE_CN0,
    ENSEMBLE_ELEVATION,
    ENSEMBLE_EVENTS,
    CalibrationBundle,
    ReplayLog,
    calibrate,
    ensemble,
    evaluate,
    save_log_meta,
    replay,
    write_ensemble,
    write_results,
)
from .policies import POLICIES
from .scenario import REFERENCE_PEAK_TECU, ScenarioConfig, Trace, build_scenario, event_flux
from .xrs import parse_xrs_file

log = logging.getLogger("ionolink")


@dataclass
class RunManifest:
    """Run description loaded from ``--config`` (JSON); every key is optional."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    event: str = "impulsive"
    xrs_path: str | None = None
    peak_tecu: float | None = None
    duration_s: float | None = None
    policies: list[str] = field(default_factory=lambda: ["no-adapt", "adapt-1+2"])
    gates: list[float] = field(default_factory=lambda: list(DEFAULT_GATES))
    a_scale: list[float] = field(default_factory=lambda: list(ENSEMBLE_A_SCALE))
    elevation: list[float] = field(default_factory=lambda: list(ENSEMBLE_ELEVATION))
    cn0: list[float] = field(default_factory=lambda: list(ENSEMBLE_CN0))
    events: list[str] = field(default_factory=lambda: list(ENSEMBLE_EVENTS))
    tau_hp: list[float] = field(default_factory=list)
    config_path: str | None = None

    @classmethod
    def load(cls, path: str | None) -> "RunManifest":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        doc = dict(doc)
        scen = doc.pop("scenario", {})
        ens = doc.pop("ensemble", {})
        known = {f for f in cls.__dataclass_fields__} - {"scenario", "config_path"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        m = cls(ScenarioConfig.from_dict(scen), config_path=str(path), **doc)
        for key, value in ens.items():
            if key not in ("a_scale", "elevation", "cn0", "events", "tau_hp"):
                raise ConfigError(f"{path}: unknown ensemble axis {key!r}")
            setattr(m, key, list(value))
        return m

    def scenario_for_run(self, seed: int | None) -> ScenarioConfig:
        cfg = self.scenario
        if self.peak_tecu is not None:
            cfg = replace(cfg, amplitude_scale=self.peak_tecu / REFERENCE_PEAK_TECU)
        if seed is not None:
            cfg = replace(cfg, rng_seed=seed)
        return cfg


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated number list, got {text!r}") from None


def _build_trace(manifest: RunManifest, seed: int | None) -> Trace:
    cfg = manifest.scenario_for_run(seed)
    series = parse_xrs_file(manifest.xrs_path) if manifest.xrs_path else event_flux(manifest.event)
    return build_scenario(series, cfg, manifest.duration_s)


def read_trace_csv(path, cfg: ScenarioConfig) -> Trace:
    """Trace from a CSV with t_s and y_rad (truth columns optional)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "t_s" not in rows[0] or "y_rad" not in rows[0]:
        raise DataError(f"{path} needs t_s and y_rad columns")
    t = np.array([float(r["t_s"]) for r in rows])
    y = np.array([float(r["y_rad"]) for r in rows])
    dt = np.diff(t)
    if len(t) < 2 or np.any(dt <= 0) or np.ptp(dt) > 1e-6:
        raise DataError(f"{path} is not on a uniform increasing time grid")

    def col(name):
        return np.array([float(r[name]) for r in rows]) if name in rows[0] else np.zeros(len(t))

    dvtec = col("truth_dvtec_tecu")
    rate = np.concatenate([np.diff(dvtec) / dt, [0.0]])
    return Trace(t, y, dvtec, col("truth_bias_rad"), rate, float(np.median(dt)), cfg.t0_s, cfg.k_eff)


# -- subcommands --------------------------------------------------------------------


def cmd_calibrate(args, manifest: RunManifest) -> int:
    scen = manifest.scenario if args.seed is None else replace(manifest.scenario, rng_seed=args.seed)
    path = Path(args.bundle)
    if path.exists():
        raise BundleExists(f"{path} already holds a frozen calibration")
    taus = args.tau_hp if args.tau_hp is not None else manifest.tau_hp
    b = calibrate(scen, seed=scen.rng_seed, tau_hp_list=taus)
    digest = b.save(path)
    rec = b.record
    print(f"bundle {path} sha256={digest}")
    print(f"threshold={rec.threshold:.4f} sigma_pre={rec.sigma_pre:.6g} blocks={len(rec.block_maxima)} c={b.margin.c_offset:.4f} dB")
    print(f"anchor k={b.anchor.k_slope:.4f} m_piv={b.anchor.m_piv_db:.4f} dB")
    return 0


def cmd_synthesize(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr = _build_trace(manifest, args.seed)
    tr.to_csv(out / "trace.csv")
    print(f"{out / 'trace.csv'}: {len(tr)} epochs, peak dVTEC {tr.truth_dvtec_tecu.max():.3f} TECU, K_eff {tr.k_eff:.5f} rad/TECU")
    return 0


def cmd_replay(args, manifest: RunManifest) -> int:
    bundle = CalibrationBundle.load(args.bundle)
    policies = args.policy or manifest.policies
    unknown = [p for p in policies if p not in POLICIES]
    if unknown:
        raise UnknownPolicy(f"unknown policies {unknown}; known: {sorted(POLICIES)}")
    cfg = manifest.scenario_for_run(args.seed)
    tr = read_trace_csv(args.trace, cfg) if args.trace else _build_trace(manifest, args.seed)
    tau = args.tau_hp[0] if args.tau_hp else None
    logs = replay(tr, bundle, policies, cn0_dbhz=cfg.cn0_dbhz, tau_hp_s=tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, lg in logs.items():
        stem = name.replace("+", "p")
        lg.to_csv(out / f"{stem}.csv")
        save_log_meta(lg, out / f"{stem}.meta.json")
        print(f"{name}: {out / (stem + '.csv')} mean T={lg['goodput_bpshz'].mean():.4f} BLER={lg['bler'].mean():.4f} transitions={len(lg.transitions)}")
    t = next(iter(logs.values())).timing()
    print(f"per-epoch cost: median {t['median_ms']:.4f} ms, mean {t['mean_ms']:.4f} ms ({len(logs)} policies in lockstep)")
    return 0


def _check_log_provenance(path: Path, bundle: CalibrationBundle) -> None:
    meta = path.with_suffix(".meta.json")
    if meta.exists():
        stored = json.loads(meta.read_text(encoding="utf-8")).get("bundle_sha256")
        if stored and stored != bundle.sha256:
            raise FrozenProtocolError(f"{path} was produced under a different calibration bundle")


def cmd_evaluate(args, manifest: RunManifest) -> int:
    bundle = CalibrationBundle.load(args.bundle)
    if len(args.logs) != 2:
        raise ConfigError("evaluate needs two logs: ADAPT BASELINE")
    paths = [Path(p) for p in args.logs]
    for p in paths:
        if not p.exists():
            raise DataError(f"log {p} not found")
        _check_log_provenance(p, bundle)
    adapt, base = (ReplayLog.from_csv(p) for p in paths)
    gates = args.gates if args.gates is not None else manifest.gates
    rows, worst = evaluate(adapt, base, gates, seed=0 if args.seed is None else args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(rows, out / "results.csv")
    (out / "worst_window.json").write_text(json.dumps(worst, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for r in rows:
        flag = "*" if r.reject_holm else " "
        print(f"{r.metric:6s} {r.gate:10s} n={r.n:6d} mean={r.mean:+.5f} CI=[{r.ci_low:+.5f}, {r.ci_high:+.5f}] p={r.p_raw:.4g} p_holm={r.p_holm:.4g}{flag} d={r.cohens_d:.3f}")
    print(f"worst 60 s window at {worst['start_s']:.1f} s: BLER {worst['bler_base']:.4f} -> {worst['bler_adapt']:.4f} ({100 * worst['peak_bler_reduction']:.1f}% reduction)")
    return 0


def cmd_ensemble(args, manifest: RunManifest) -> int:
    bundle = CalibrationBundle.load(args.bundle)
    taus = args.tau_hp if args.tau_hp is not None else (manifest.tau_hp or [None])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        print(f"A={r.a_scale:g} eps={r.elevation_deg:g} cn0={r.cn0_dbhz:g} tau={r.tau_hp_s:g}: dT={r.dT_mean:+.5f}+-{r.dT_std:.5f} dBLER={r.dBLER_mean:+.5f}+-{r.dBLER_std:.5f}", flush=True)

    rows = ensemble(
        bundle, manifest.a_scale, manifest.elevation, manifest.cn0, manifest.events, taus,
        seed=0 if args.seed is None else args.seed, progress=progress,
    )  # fmt: skip
    write_ensemble(rows, out / "ensemble.csv")
    print(f"{out / 'ensemble.csv'}: {len(rows)} rows")
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "synthesize": cmd_synthesize,
    "replay": cmd_replay,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ionolink", description="Ionosphere-aware risk-gated link adaptation replay.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, bundle=True, out=True):
        sp.add_argument("--config", help="run manifest (JSON)")
        sp.add_argument("--seed", type=int, default=None)
        if bundle:
            sp.add_argument("--bundle", required=True, help="frozen calibration bundle")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = common(sub.add_parser("calibrate", help="freeze detector, BLER anchor and outage offset"), out=False)
    sp.add_argument("--tau-hp", type=_float_list, default=None, help="extra high-pass constants to calibrate")
    common(sub.add_parser("synthesize", help="write a synthetic GF trace"), bundle=False)
    sp = common(sub.add_parser("replay", help="closed-loop replay, one CSV log per policy"))
    sp.add_argument("--policy", action="append", help=f"policy name, repeatable ({', '.join(POLICIES)})")
    sp.add_argument("--trace", help="replay a trace CSV instead of synthesizing one")
    sp.add_argument("--tau-hp", type=_float_list, default=None)
    sp = common(sub.add_parser("evaluate", help="paired bootstrap of two logs"))
    sp.add_argument("logs", nargs="+", help="ADAPT_LOG BASELINE_LOG")
    sp.add_argument("--gates", type=_float_list, default=None)
    sp = common(sub.add_parser("ensemble", help="A_scale x elevation x C/N0 sweep"))
    sp.add_argument("--tau-hp", type=_float_list, default=None)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = RunManifest.load(args.config)
        return COMMANDS[args.command](args, manifest)
    except IonolinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
