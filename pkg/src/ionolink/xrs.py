"""GOES XRS-B one-minute irradiance ingest and detrending.

Two feed layouts are understood:

* delimiter-separated text with a header row (NCEI archive style), with the
  long channel in a column such as ``xrsb_flux``; a ``time_tag`` column carries
  the UTC time. The package's own cache format (``epoch_s,flux_wm2``) is a
  special case of this layout.
* structured records (SWPC JSON feed), either a JSON array or one JSON object
  per line, with ``time_tag``, ``flux`` and ``energy`` fields. Only records with
  ``energy == "0.1-0.8nm"`` are kept.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptySeries, NonMonotonicTime, UnknownFormat, WindowTooLong

log = logging.getLogger(__name__)

MINUTE_S = 60
LONG_BAND = "0.1-0.8nm"
MISSING_SENTINELS = (-99999.0, -9999.0)

_TIME_COLUMNS = ("time_tag", "time", "timestamp", "epoch_s")
_LONG_COLUMNS = ("xrsb_flux", "b_flux", "b_avg", "xrsb", "xl", "flux_wm2", "long_flux")
_SHORT_COLUMNS = ("xrsa_flux", "a_flux", "a_avg", "xrsa", "xs")


@dataclass
class XrsSeries:
    timestamps_utc: np.ndarray  # epoch seconds, minute-aligned
    flux_wm2: np.ndarray
    source_tag: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps_utc = np.asarray(self.timestamps_utc, dtype=np.int64)
        self.flux_wm2 = np.asarray(self.flux_wm2, dtype=float)
        if self.timestamps_utc.shape != self.flux_wm2.shape:
            raise ValueError("timestamps and flux must have equal length")
        if len(self.timestamps_utc) > 1 and np.any(np.diff(self.timestamps_utc) <= 0):
            raise NonMonotonicTime("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps_utc)

    def gaps(self) -> np.ndarray:
        """Indices i where sample i+1 is more than one minute after sample i."""
        return np.nonzero(np.diff(self.timestamps_utc) != MINUTE_S)[0]

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full minute grid from first to last sample; missing minutes are NaN."""
        t = self.timestamps_utc
        if len(t) == 0:
            return t.copy(), self.flux_wm2.copy()
        grid = np.arange(t[0], t[-1] + MINUTE_S, MINUTE_S, dtype=np.int64)
        flux = np.full(grid.shape, np.nan)
        flux[(t - t[0]) // MINUTE_S] = self.flux_wm2
        return grid, flux


def parse_time(text: str) -> int:
    """UTC epoch seconds from ``YYYY-MM-DDTHH:MM:SS[.f]Z``, ``YYYY-MM-DD HH:MM:SS`` or a number."""
    text = text.strip()
    try:
        return int(round(float(text)))
    except ValueError:
        pass
    s = text.rstrip("Z").replace("T", " ")
    for fmt in ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"):
        try:
            dt = datetime.strptime(s, fmt)
            break
        except ValueError:
            continue
    else:
        raise UnknownFormat(f"unparseable timestamp {text!r}")
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


def format_time(epoch_s: int) -> str:
    return datetime.fromtimestamp(int(epoch_s), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _to_float(text) -> float:
    if text is None:
        return math.nan
    try:
        v = float(text)
    except (TypeError, ValueError):
        return math.nan
    if v in MISSING_SENTINELS or v < 0 or not math.isfinite(v):
        return math.nan
    return v


def _condition(rows: list[tuple[int, float]], source_tag: str) -> XrsSeries:
    """Minute-align, drop duplicate minutes (first wins) and missing values."""
    seen: set[int] = set()
    times: list[int] = []
    flux: list[float] = []
    for t, f in rows:
        minute = (t // MINUTE_S) * MINUTE_S
        if minute in seen:
            continue
        seen.add(minute)
        if math.isnan(f):
            continue
        if times and minute < times[-1]:
            raise NonMonotonicTime(f"time goes backward at {format_time(minute)}")
        times.append(minute)
        flux.append(f)
    if not times:
        raise EmptySeries("no valid long-band samples")
    series = XrsSeries(np.array(times), np.array(flux), source_tag)
    if len(series.gaps()):
        log.warning("%s series has %d gap(s); missing minutes are left missing", source_tag, len(series.gaps()))
    return series


def _parse_delimited(text: str) -> XrsSeries:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise EmptySeries("file has no data rows")
    dialect = csv.Sniffer().sniff(lines[0], delimiters=",;\t ") if len(lines[0].split(",")) < 2 else csv.excel
    reader = csv.reader(io.StringIO("\n".join(lines)), dialect)
    header = [h.strip().lower() for h in next(reader)]
    tcol = next((header.index(c) for c in _TIME_COLUMNS if c in header), None)
    fcol = next((header.index(c) for c in _LONG_COLUMNS if c in header), None)
    if tcol is None or fcol is None:
        raise UnknownFormat(f"no recognised time/long-band columns in header {header}")
    source = "cache" if header[fcol] == "flux_wm2" else "NCEI"
    rows = []
    for rec in reader:
        if len(rec) <= max(tcol, fcol):
            continue
        rows.append((parse_time(rec[tcol]), _to_float(rec[fcol])))
    if not rows:
        raise EmptySeries("file has a header but no data rows")
    return _condition(rows, source)


def _parse_records(text: str) -> XrsSeries:
    stripped = text.strip()
    try:
        payload = json.loads(stripped)
        records = payload if isinstance(payload, list) else [payload]
    except json.JSONDecodeError:
        try:
            records = [json.loads(ln) for ln in stripped.splitlines() if ln.strip()]
        except json.JSONDecodeError as exc:
            raise UnknownFormat(f"not a JSON feed: {exc}") from exc
    rows = []
    for rec in records:
        if not isinstance(rec, dict) or "time_tag" not in rec or "flux" not in rec:
            raise UnknownFormat("JSON records need time_tag and flux fields")
        energy = str(rec.get("energy", LONG_BAND)).replace(" ", "")
        if energy != LONG_BAND:
            continue
        rows.append((parse_time(str(rec["time_tag"])), _to_float(rec["flux"])))
    if not rows:
        raise EmptySeries("no 0.1-0.8nm records")
    return _condition(rows, "SWPC")


def parse_xrs_file(path, format_hint: str = "auto") -> XrsSeries:
    """Read an NCEI/SWPC/cache XRS file into a conditioned long-band series."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise EmptySeries(f"{path} is empty")
    hint = (format_hint or "auto").lower()
    if hint == "auto":
        hint = "swpc" if text.lstrip()[0] in "[{" else "ncei"
    if hint == "swpc":
        return _parse_records(text)
    if hint == "ncei":
        return _parse_delimited(text)
    raise UnknownFormat(f"unknown format hint {format_hint!r}")


def write_xrs_cache(series: XrsSeries, path) -> None:
    """Canonical two-column cache: ``epoch_s,flux_wm2``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch_s", "flux_wm2"])
        for t, f in zip(series.timestamps_utc, series.flux_wm2):
            w.writerow([int(t), repr(float(f))])


def detrend_flux(series: XrsSeries, baseline_window_min: int = 60) -> np.ndarray:
    """Excess over a trailing-minimum baseline, clipped at zero.

    The baseline at minute t is the minimum over minutes (t - W, t], counted on
    the wall-clock minute grid so gaps shorten the effective window.
    """
    n = len(series)
    if n == 0:
        raise EmptySeries("cannot detrend an empty series")
    if not 1 <= baseline_window_min <= n:
        raise WindowTooLong(f"baseline window {baseline_window_min} min outside [1, {n}]")
    grid, flux = series.dense()
    padded = np.concatenate([np.full(baseline_window_min - 1, np.nan), flux])
    windows = sliding_window_view(padded, baseline_window_min)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN windows inside gaps
        baseline = np.nanmin(windows, axis=1)
    excess = np.clip(flux - baseline, 0.0, None)
    idx = (series.timestamps_utc - grid[0]) // MINUTE_S
    return excess[idx]


def synthetic_flare(
    start_epoch_s: int = 1_504_656_000,
    duration_min: int = 180,
    onset_min: int = 15,
    peak_wm2: float = 1e-4,
    background_wm2: float = 1e-6,
    rise_min: float = 6.0,
    decay_min: float = 18.0,
    second_peak: tuple[float, float] | None = None,
) -> XrsSeries:
    """GOES-shaped long-band flare on a flat background.

    Gaussian rise to the peak and exponential decay, the usual impulsive
    morphology. ``second_peak = (delay_min, relative_amplitude)`` adds a
    delayed sub-peak with the same shape.
    """
    t_min = np.arange(duration_min, dtype=float)

    def pulse(t_peak, amp):
        dt = t_min - t_peak
        shape = np.where(dt < 0, np.exp(-0.5 * (dt / (rise_min / 2.0)) ** 2), np.exp(-dt / decay_min))
        shape[t_min < t_peak - 2.0 * rise_min] = 0.0
        return amp * shape

    t_peak = onset_min + 2.0 * rise_min
    flux = background_wm2 + pulse(t_peak, peak_wm2)
    if second_peak is not None:
        delay, rel = second_peak
        flux += pulse(t_peak + delay, rel * peak_wm2)
    times = start_epoch_s + 60 * np.arange(duration_min, dtype=np.int64)
    return XrsSeries(times, flux, "synthetic", {"onset_min": onset_min})
