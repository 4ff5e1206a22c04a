"""Evaluations on symbolized and raw telemetry.

* incident analysis: pattern occurrences become events with a pre-event
  context window that can be pulled from the store at full resolution;
* operations recognition: mode patterns over fused state sequences;
* commissioning: isolated sensor glitches via a local median/MAD rule;
* long-term load distribution: streaming polar histograms over slew angle.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .astsa import STATE, SymbolSequence
from .core import (
    SECONDS_PER_DAY,
    Series,
    TimeRange,
    Timestamp,
    align,
    format_iso,
    runs,
)
from .errors import BinWidthError, InsufficientData
from .symquery import Match, Pattern, find_matches

MAD_EPSILON = 1e-12
DEFAULT_BIN_WIDTH_DEG = 5.0

# ------------------------------------------------------------ incident analysis


@dataclass(frozen=True)
class Event:
    event_id: int
    pattern_text: str
    t_event: Timestamp
    window: TimeRange
    match: Match
    clipped: bool = False

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "pattern": self.pattern_text,
            "t_event": format_iso(self.t_event),
            "window_start": format_iso(self.window.start),
            "window_end": format_iso(self.window.end),
            "clipped": self.clipped,
            **self.match.to_dict(),
        }


def detect_events(seq: SymbolSequence, pattern: Pattern, context_window_s: int) -> list[Event]:
    """One event per pattern match.

    The event instant is the last sample covered by the match, and the
    context window is the ``context_window_s`` seconds ending with that
    sample.  Windows reaching before the sequence start are clipped and
    flagged.
    """
    if context_window_s <= 0:
        raise ValueError("context_window_s must be positive")
    dt = seq.dt_seconds
    seq_start = seq.tokens[0].t_start if seq.tokens else 0
    events = []
    for n, m in enumerate(find_matches(pattern, seq), start=1):
        t_event = m.t_end - dt
        end = t_event + dt
        start = end - context_window_s
        clipped = start < seq_start
        window = TimeRange(max(start, seq_start), end)
        events.append(Event(n, pattern.text, t_event, window, m, clipped))
    return events


def events_to_ndjson(events: Iterable[Event]) -> str:
    return "".join(json.dumps(e.to_dict()) + "\n" for e in events)


TIMELINE_HEADER = "event_id,t_event,window_start,window_end,clipped"


@dataclass
class EventReport:
    """Overview timeline plus the raw data slice of every event window."""

    events: list
    sections: list = field(default_factory=list)  # Stream per event

    def timeline_csv(self) -> str:
        lines = [TIMELINE_HEADER]
        for e in self.events:
            lines.append(
                f"{e.event_id},{format_iso(e.t_event)},{format_iso(e.window.start)},"
                f"{format_iso(e.window.end)},{int(e.clipped)}"
            )
        return "\n".join(lines) + "\n"

    def section_csv(self, i: int) -> str:
        from .store import export

        buf = io.BytesIO()
        export(self.sections[i], "csv", buf)
        return buf.getvalue().decode("utf-8")

    def to_text(self) -> str:
        parts = ["# timeline\n", self.timeline_csv()]
        for i, e in enumerate(self.events):
            flag = " clipped" if e.clipped else ""
            parts.append(f"# event {e.event_id} window {e.window}{flag}\n")
            parts.append(self.section_csv(i))
        return "".join(parts)

    def write_dir(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "timeline.csv"]
        written[0].write_text(self.timeline_csv(), encoding="utf-8", newline="\n")
        for i, e in enumerate(self.events):
            path = out / f"event_{e.event_id:04d}.csv"
            path.write_text(self.section_csv(i), encoding="utf-8", newline="\n")
            written.append(path)
        return written


def event_report(events: Sequence[Event], store, machine_id: str, channel_ids: Sequence[str]) -> EventReport:
    """Pull each event window at full resolution from ``store``."""
    sections = [store.read_range(machine_id, list(channel_ids), e.window) for e in events]
    return EventReport(list(events), sections)


# ------------------------------------------------------ operations recognition


def recognize_operations(state_seq: SymbolSequence, mode_patterns: Mapping[str, Pattern]) -> list[tuple[str, Match]]:
    """Matches of every mode pattern, merged and ordered by start time.

    Different modes may overlap; each is reported.
    """
    if any(t.kind != STATE for t in state_seq.tokens):
        raise ValueError("operations are recognized on state sequences only")
    found = [(name, m) for name, p in mode_patterns.items() for m in find_matches(p, state_seq)]
    found.sort(key=lambda nm: (nm[1].t_start, nm[1].first_token_index, nm[0]))
    return found


# -------------------------------------------------------------- sensor faults


@dataclass(frozen=True)
class FaultReport:
    channel_id: str
    fault_timestamps: tuple
    rules: tuple  # "OutOfRangeIsolated" | "LocalOutlier", parallel to fault_timestamps

    def __len__(self):
        return len(self.fault_timestamps)

    def to_ndjson(self) -> str:
        return "".join(
            json.dumps({"channel": self.channel_id, "t": format_iso(t), "rule": r}) + "\n"
            for t, r in zip(self.fault_timestamps, self.rules)
        )


def local_median_mad(x: np.ndarray, half_window: int, block: int = 65_536) -> tuple[np.ndarray, np.ndarray]:
    """Median and MAD over a centered window of ``2*half_window+1`` values.

    Near the ends the window is shifted inward so that it always holds the
    full number of values.
    """
    w = 2 * half_window + 1
    m = x.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x, w)
    first = np.clip(np.arange(m) - half_window, 0, m - w)
    med = np.empty(m)
    mad = np.empty(m)
    for lo in range(0, m, block):
        rows = windows[first[lo : lo + block]]
        c = np.median(rows, axis=1)
        med[lo : lo + block] = c
        mad[lo : lo + block] = np.median(np.abs(rows - c[:, None]), axis=1)
    return med, mad


def find_sporadic_faults(series: Series, max_run: int = 5, k: float = 8.0, half_window: int = 30) -> FaultReport:
    """Flag short runs of implausible samples.

    A present sample is a candidate when it lies outside the channel's
    physical range or deviates from the median of its ``2*half_window+1``
    neighbouring present samples by more than ``k * (MAD + 1e-12)``.
    Candidates are reported only in runs of at most ``max_run`` samples;
    longer runs are treated as real signal.
    """
    if max_run <= 0 or k <= 0 or half_window <= 0:
        raise ValueError("max_run, k and half_window must be positive")
    values = series.values
    idx = np.flatnonzero(~np.isnan(values))
    if idx.size < 2 * half_window + 1:
        raise InsufficientData(
            f"{series.channel_id}: {idx.size} present samples, need {2 * half_window + 1}"
        )
    x = values[idx]
    med, mad = local_median_mad(x, half_window)
    outlier = np.zeros(len(series), dtype=bool)
    outlier[idx] = np.abs(x - med) > k * (mad + MAD_EPSILON)
    with np.errstate(invalid="ignore"):
        out_of_range = (values < series.meta.phys_min) | (values > series.meta.phys_max)
    flagged = outlier | out_of_range
    starts, lengths = runs(flagged)
    keep = np.zeros(len(series), dtype=bool)
    for s, n in zip(starts[lengths <= max_run], lengths[lengths <= max_run]):
        keep[s : s + n] = True
    pos = np.flatnonzero(keep)
    times = series.t0 + pos * series.dt_seconds
    rules = np.where(out_of_range[pos], "OutOfRangeIsolated", "LocalOutlier")
    return FaultReport(series.channel_id, tuple(int(t) for t in times), tuple(str(r) for r in rules))


# --------------------------------------------------------- polar aggregation


def _bin_count(bin_width_deg: float) -> int:
    if not bin_width_deg > 0:
        raise BinWidthError("bin width must be positive")
    n = round(360.0 / bin_width_deg)
    if n < 1 or abs(n * bin_width_deg - 360.0) > 1e-9:
        raise BinWidthError(f"360 is not divisible by bin width {bin_width_deg}")
    return n


@dataclass(frozen=True)
class PolarBin:
    angle_start_deg: float
    count: int
    sum: float
    mean: float  # NaN for empty bins


class PolarHistogram:
    """Per-angle-bin count and load sum; merging two histograms adds them."""

    def __init__(self, bin_width_deg: float = DEFAULT_BIN_WIDTH_DEG):
        self.bin_width_deg = float(bin_width_deg)
        self.n_bins = _bin_count(self.bin_width_deg)
        self.counts = np.zeros(self.n_bins, dtype=np.int64)
        self.sums = np.zeros(self.n_bins, dtype=np.float64)

    def bin_index(self, angles: np.ndarray) -> np.ndarray:
        a = np.mod(angles, 360.0)
        return np.minimum(np.floor_divide(a, self.bin_width_deg).astype(np.int64), self.n_bins - 1)

    def update(self, angles: np.ndarray, loads: np.ndarray) -> "PolarHistogram":
        """Add aligned sample pairs; pairs with a missing member are skipped."""
        angles = np.asarray(angles, dtype=np.float64)
        loads = np.asarray(loads, dtype=np.float64)
        ok = ~np.isnan(angles) & ~np.isnan(loads)
        b = self.bin_index(angles[ok])
        self.counts += np.bincount(b, minlength=self.n_bins)
        self.sums += np.bincount(b, weights=loads[ok], minlength=self.n_bins)
        return self

    def merge(self, other: "PolarHistogram") -> "PolarHistogram":
        if other.n_bins != self.n_bins:
            raise BinWidthError("cannot merge histograms with different bin widths")
        out = PolarHistogram(self.bin_width_deg)
        out.counts = self.counts + other.counts
        out.sums = self.sums + other.sums
        return out

    __add__ = merge

    @property
    def total_samples(self) -> int:
        return int(self.counts.sum())

    @property
    def bins(self) -> list[PolarBin]:
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)
        return [
            PolarBin(i * self.bin_width_deg, int(c), float(s), float(m))
            for i, (c, s, m) in enumerate(zip(self.counts, self.sums, means))
        ]

    def to_csv(self) -> str:
        lines = ["bin_start_deg,count,sum,mean"]
        for b in self.bins:
            mean = "" if math.isnan(b.mean) else repr(b.mean)
            lines.append(f"{b.angle_start_deg!r},{b.count},{b.sum!r},{mean}")
        total = float(self.sums.sum())
        n = self.total_samples
        lines.append(f"total,{n},{total!r},{repr(total / n) if n else ''}")
        return "\n".join(lines) + "\n"

    def __repr__(self):
        return f"PolarHistogram(bin_width_deg={self.bin_width_deg}, total_samples={self.total_samples})"


def _blocks(angle: Series, load: Series, block: int = 1 << 20):
    a, l = align(angle, load)
    for lo in range(0, len(a), block):
        times = a.t0 + a.dt_seconds * np.arange(lo, min(len(a), lo + block), dtype=np.int64)
        yield times, a.values[lo : lo + block], l.values[lo : lo + block]


def polar_histogram(angle: Series, load: Series, bin_width_deg: float = DEFAULT_BIN_WIDTH_DEG) -> PolarHistogram:
    hist = PolarHistogram(bin_width_deg)
    for _, a, l in _blocks(angle, load):
        hist.update(a, l)
    return hist


def polar_histogram_stream(pairs: Iterable[tuple[Series, Series]],
                           bin_width_deg: float = DEFAULT_BIN_WIDTH_DEG) -> PolarHistogram:
    """Histogram over an iterable of ``(angle, load)`` pieces, e.g. one per stored day."""
    hist = PolarHistogram(bin_width_deg)
    for angle, load in pairs:
        hist = hist + polar_histogram(angle, load, bin_width_deg)
    return hist


@dataclass(frozen=True)
class QuadrantLoad:
    days: tuple  # day start timestamps with at least one valid sample pair
    daily_means: tuple  # mean load in the quadrant per day (NaN if not visited)
    annual_quadrant_share: float


class _QuadrantTally:
    def __init__(self, bin_width_deg: float, quadrant: int):
        n = _bin_count(bin_width_deg)
        if n % 4:
            raise BinWidthError(f"bin width {bin_width_deg} does not split quadrants")
        if quadrant not in (0, 1, 2, 3):
            raise ValueError("quadrant must be 0, 1, 2 or 3")
        self.hist = PolarHistogram(bin_width_deg)
        self.first_bin = quadrant * n // 4
        self.last_bin = (quadrant + 1) * n // 4
        self.daily: dict[int, list] = {}  # day -> [quadrant_sum, quadrant_count]
        self.q_sum = 0.0
        self.total = 0.0

    def update(self, times, angles, loads):
        ok = ~np.isnan(angles) & ~np.isnan(loads)
        times, angles, loads = times[ok], angles[ok], loads[ok]
        b = self.hist.bin_index(angles)
        inq = (b >= self.first_bin) & (b < self.last_bin)
        days = times - times % SECONDS_PER_DAY
        for d in np.unique(days).tolist():
            sel = days == d
            acc = self.daily.setdefault(d, [0.0, 0])
            q = sel & inq
            acc[0] += float(loads[q].sum())
            acc[1] += int(q.sum())
        self.q_sum += float(loads[inq].sum())
        self.total += float(loads.sum())

    def result(self) -> QuadrantLoad:
        days = sorted(self.daily)
        means = tuple(self.daily[d][0] / self.daily[d][1] if self.daily[d][1] else math.nan for d in days)
        share = self.q_sum / self.total if self.q_sum and self.total else 0.0
        return QuadrantLoad(tuple(days), means, share)


def daily_vs_aggregate(angle: Series, load: Series, bin_width_deg: float = DEFAULT_BIN_WIDTH_DEG,
                       quadrant: int = 0) -> QuadrantLoad:
    """Per-day mean load inside ``quadrant`` against its share of the total load.

    Quadrant ``q`` covers angles ``[90*q, 90*(q+1))`` degrees.
    """
    tally = _QuadrantTally(bin_width_deg, quadrant)
    for times, a, l in _blocks(angle, load):
        tally.update(times, a, l)
    return tally.result()


def daily_vs_aggregate_stream(pairs: Iterable[tuple[Series, Series]],
                              bin_width_deg: float = DEFAULT_BIN_WIDTH_DEG, quadrant: int = 0) -> QuadrantLoad:
    tally = _QuadrantTally(bin_width_deg, quadrant)
    for angle, load in pairs:
        for times, a, l in _blocks(angle, load):
            tally.update(times, a, l)
    return tally.result()
