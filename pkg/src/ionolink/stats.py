"""Paired block bootstrap, Holm step-down, effect sizes and gated subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateVariance, EmptyGate, GridMismatch, SeriesTooShort


@dataclass(frozen=True)
class PairedSeries:
    t_s: np.ndarray
    delta: np.ndarray
    gate_mask: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t_s, dtype=float)
        d = np.asarray(self.delta, dtype=float)
        if t.shape != d.shape or t.ndim != 1:
            raise GridMismatch("time grid and differences differ in length")
        if not np.all(np.isfinite(d)):
            raise ValueError("paired differences must be finite")
        object.__setattr__(self, "t_s", t)
        object.__setattr__(self, "delta", d)
        if self.gate_mask is not None:
            m = np.asarray(self.gate_mask, dtype=bool)
            if m.shape != d.shape:
                raise GridMismatch("gate mask length differs from the series")
            object.__setattr__(self, "gate_mask", m)

    def __len__(self):
        return len(self.delta)

    @property
    def dt_s(self) -> float:
        if len(self.t_s) < 2:
            return 0.1
        return float(np.median(np.diff(self.t_s)))

    @classmethod
    def from_logs(cls, t_s, a, b) -> "PairedSeries":
        return cls(np.asarray(t_s), np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    ci_low: float
    ci_high: float
    p_value: float
    cohens_d: float
    B: int
    block_len_s: float


def _block_len(series: PairedSeries, block_len_s: float) -> int:
    return max(int(math.floor(block_len_s / series.dt_s + 1e-9)), 1)


def cohens_d(series: PairedSeries, block_len_s: float = 12.0) -> float:
    """Mean over sample std (ddof 1) of non-overlapping block means."""
    L = _block_len(series, block_len_s)
    n_blocks = len(series) // L
    if n_blocks < 2:
        raise SeriesTooShort(f"{len(series)} samples hold fewer than two {L}-sample blocks")
    means = series.delta[: n_blocks * L].reshape(n_blocks, L).mean(axis=1)
    sd = float(np.std(means, ddof=1))
    if sd <= 1e-15 * max(1.0, float(np.max(np.abs(means)))):
        raise DegenerateVariance("block means have zero spread")
    return float(np.mean(means)) / sd


def moving_block_bootstrap(series: PairedSeries, block_len_s: float = 12.0, B: int = 2000, rng_seed: int = 0) -> BootstrapResult:
    """Overlapping-block bootstrap of mean(delta), no wrap-around.

    Percentile CI from order statistics ceil(0.025 B) and floor(0.975 B)
    (1-based); two-sided p = 2 min(P*[mean <= 0], P*[mean >= 0]), floored at 1/B.
    """
    if B < 100:
        raise ValueError("need B >= 100 resamples")
    d = series.delta
    n = len(d)
    L = _block_len(series, block_len_s)
    if n < 2 * L:
        raise SeriesTooShort(f"{n} samples are fewer than two {L}-sample blocks")
    n_starts = n - L + 1
    k = int(math.ceil(n / L))
    csum = np.concatenate([[0.0], np.cumsum(d)])
    block_sums = csum[L:] - csum[:n_starts]
    # the final block of each resample is truncated to restore length n
    tail = n - (k - 1) * L
    tail_sums = csum[tail : tail + n_starts] - csum[:n_starts]
    rng = np.random.default_rng(rng_seed)
    starts = rng.integers(0, n_starts, size=(B, k))
    totals = block_sums[starts[:, :-1]].sum(axis=1) + tail_sums[starts[:, -1]]
    means = np.sort(totals / n)
    mean = float(np.mean(d))
    if np.ptp(d) == 0.0:
        mean = float(d[0])  # exact constant series: suppress summation round-off
        means[:] = mean
    lo = float(means[int(math.ceil(0.025 * B)) - 1])
    hi = float(means[int(math.floor(0.975 * B)) - 1])
    p = 2.0 * min(float(np.mean(means <= 0.0)), float(np.mean(means >= 0.0)))
    p = min(max(p, 1.0 / B), 1.0)
    try:
        d_eff = cohens_d(series, block_len_s)
    except DegenerateVariance:
        d_eff = float("nan")
    return BootstrapResult(mean, lo, hi, p, d_eff, B, block_len_s)


def holm_bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> tuple[list[bool], list[bool]]:
    """Step-down Holm decisions (input order) and raw per-test decisions."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values")
    m = len(p)
    order = np.argsort(p, kind="stable")
    reject = [False] * m
    for rank, i in enumerate(order):
        if p[i] <= alpha / (m - rank):
            reject[i] = True
        else:
            break
    return reject, [bool(v <= alpha) for v in p]


def holm_adjusted(p_values: Sequence[float]) -> list[float]:
    """Holm-adjusted p-values (monotone step-down maxima)."""
    p = np.asarray(p_values, dtype=float)
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adj[i] = running
    return adj.tolist()


def gated_subset(series: PairedSeries, p_out, tau_gate: float) -> PairedSeries:
    """Epochs with p_out > tau_gate, original time stamps kept."""
    p_out = np.asarray(p_out, dtype=float)
    if p_out.shape != series.delta.shape:
        raise GridMismatch("outage series is not aligned with the differences")
    keep = p_out > tau_gate if tau_gate > 0 else np.ones(len(p_out), dtype=bool)
    if not keep.any():
        raise EmptyGate(f"no epoch has p_out > {tau_gate}")
    return PairedSeries(series.t_s[keep], series.delta[keep], keep[keep])


def worst_window(metric, p_out, window_s: float = 60.0, dt_s: float = 0.1, t_s=None) -> dict:
    """Metric mean over the window centred at the earliest p_out maximum."""
    metric = np.asarray(metric, dtype=float)
    p_out = np.asarray(p_out, dtype=float)
    n = len(metric)
    w = int(round(window_s / dt_s))
    if len(p_out) != n:
        raise GridMismatch("metric and outage series differ in length")
    if n <= w:
        raise SeriesTooShort("series is not longer than the window")
    centre = int(np.argmax(p_out))  # first occurrence on ties
    start = min(max(centre - w // 2, 0), n - w)
    t = dt_s * np.arange(n) if t_s is None else np.asarray(t_s, dtype=float)
    return {"start_s": float(t[start]), "centre_s": float(t[centre]), "mean_metric": float(np.mean(metric[start : start + w]))}
