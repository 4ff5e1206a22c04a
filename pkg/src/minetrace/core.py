"""Gap-aware time-series data model.

Every series lives on a fixed integer-second grid: sample ``i`` is stamped
``t0 + i * dt_seconds``.  Missing samples are kept on the grid as ``NaN``
so that coverage stays auditable and cross-packet queries never have seams.
All types are immutable after construction.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from types import MappingProxyType
from typing import Mapping, NamedTuple, Optional

import numpy as np

from .errors import MismatchedInterval

Timestamp = int

SECONDS_PER_DAY = 86_400

_CHANNEL_ID = re.compile(r"[a-z0-9_]+\Z")
_ISO = re.compile(r"(\d{4})-(\d{2})-(\d{2})(?:[T ](\d{2}):(\d{2}):(\d{2})(?:Z|\+00:00)?)?\Z")


def parse_iso(text: str) -> Timestamp:
    """Parse an ISO-8601 UTC timestamp (``2016-02-08T00:00:00Z``) or date."""
    m = _ISO.match(text.strip())
    if m is None:
        raise ValueError(f"not an ISO-8601 UTC timestamp: {text!r}")
    y, mo, d, hh, mm, ss = (int(g) if g is not None else 0 for g in m.groups())
    dt = datetime(y, mo, d, hh, mm, ss, tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_iso(ts: Timestamp) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_iso_array(ts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`format_iso` returning an array of ``str``."""
    s = np.datetime_as_string(np.asarray(ts, dtype="int64").astype("datetime64[s]"), unit="s")
    return np.char.add(s.astype(str), "Z")


def day_start(ts: Timestamp) -> Timestamp:
    return ts - ts % SECONDS_PER_DAY


def runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start indices and lengths of the maximal runs of ``True`` in ``mask``."""
    m = np.asarray(mask, dtype=bool)
    if m.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    padded = np.concatenate(([False], m, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, stops = edges[0::2], edges[1::2]
    return starts.astype(np.int64), (stops - starts).astype(np.int64)


@dataclass(frozen=True)
class ChannelMeta:
    """Identity, physical range and indicator hypothesis of one signal."""

    channel_id: str
    name: str = ""
    unit: str = ""
    phys_min: float = -math.inf
    phys_max: float = math.inf
    machine_id: str = ""
    location: str = ""
    hypothesis: str = ""
    kind: str = "sensor"

    def __post_init__(self):
        if not _CHANNEL_ID.match(self.channel_id or ""):
            raise ValueError(f"channel_id must match [a-z0-9_]+: {self.channel_id!r}")
        if not self.phys_min < self.phys_max:
            raise ValueError(f"{self.channel_id}: phys_min must be < phys_max")
        if self.kind not in ("sensor", "derived"):
            raise ValueError(f"{self.channel_id}: kind must be 'sensor' or 'derived'")

    def to_dict(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "name": self.name,
            "unit": self.unit,
            "phys_min": self.phys_min,
            "phys_max": self.phys_max,
            "location": self.location,
            "hypothesis": self.hypothesis,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d: Mapping, machine_id: str = "") -> "ChannelMeta":
        return cls(
            channel_id=d["channel_id"],
            name=d.get("name", ""),
            unit=d.get("unit", ""),
            phys_min=float(d.get("phys_min", -math.inf)),
            phys_max=float(d.get("phys_max", math.inf)),
            machine_id=d.get("machine_id", machine_id),
            location=d.get("location", ""),
            hypothesis=d.get("hypothesis", ""),
            kind=d.get("kind", "sensor"),
        )


@dataclass(frozen=True)
class TimeRange:
    """Half-open interval ``[start, end)`` of epoch seconds."""

    start: Timestamp
    end: Timestamp

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"TimeRange needs start < end, got [{self.start}, {self.end})")

    @property
    def duration(self) -> int:
        return self.end - self.start

    def intersect(self, other: "TimeRange") -> Optional["TimeRange"]:
        lo, hi = max(self.start, other.start), min(self.end, other.end)
        return TimeRange(lo, hi) if lo < hi else None

    def __contains__(self, ts) -> bool:
        return self.start <= ts < self.end

    def __str__(self):
        return f"[{format_iso(self.start)}, {format_iso(self.end)})"


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise ValueError("series values must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Series:
    """One channel on a fixed grid; ``NaN`` marks a missing sample."""

    meta: ChannelMeta
    t0: Timestamp
    dt_seconds: int
    values: np.ndarray

    def __post_init__(self):
        if int(self.dt_seconds) <= 0:
            raise ValueError("dt_seconds must be a positive integer")
        object.__setattr__(self, "t0", int(self.t0))
        object.__setattr__(self, "dt_seconds", int(self.dt_seconds))
        vals = self.values
        if not (isinstance(vals, np.ndarray) and vals.dtype == np.float64 and not vals.flags.writeable):
            vals = _readonly(vals)
            object.__setattr__(self, "values", vals)
        if np.isinf(vals).any():
            raise ValueError(f"{self.meta.channel_id}: series values must be finite or missing")

    def __len__(self):
        return self.values.shape[0]

    @property
    def channel_id(self) -> str:
        return self.meta.channel_id

    @property
    def end(self) -> Timestamp:
        return self.t0 + len(self) * self.dt_seconds

    @property
    def extent(self) -> Optional[TimeRange]:
        return TimeRange(self.t0, self.end) if len(self) else None

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def times(self) -> np.ndarray:
        return self.t0 + self.dt_seconds * np.arange(len(self), dtype=np.int64)

    def with_values(self, values, t0: Optional[Timestamp] = None) -> "Series":
        return Series(self.meta, self.t0 if t0 is None else t0, self.dt_seconds, values)

    def index_span(self, rng: TimeRange) -> tuple[int, int]:
        """Index bounds ``[lo, hi)`` of the grid points falling inside ``rng``."""
        n, dt = len(self), self.dt_seconds
        lo = -((self.t0 - rng.start) // dt)  # ceil((start - t0) / dt)
        hi = -((self.t0 - rng.end) // dt)
        lo = min(max(lo, 0), n)
        hi = min(max(hi, lo), n)
        return lo, hi

    def slice(self, rng: TimeRange) -> "Series":
        lo, hi = self.index_span(rng)
        return Series(self.meta, self.t0 + lo * self.dt_seconds, self.dt_seconds, self.values[lo:hi])

    def __eq__(self, other):
        if not isinstance(other, Series):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.dt_seconds == other.dt_seconds
            and len(self) == len(other)
            and (len(self) == 0 or self.t0 == other.t0)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def __repr__(self):
        return (
            f"Series({self.channel_id!r}, t0={format_iso(self.t0)}, dt={self.dt_seconds}, "
            f"n={len(self)}, missing={int(np.isnan(self.values).sum())})"
        )


@dataclass(frozen=True, eq=False)
class Stream:
    """Multi-channel contiguous stream; every member shares t0, dt and length."""

    machine_id: str
    t0: Timestamp
    dt_seconds: int
    channels: Mapping[str, Series] = field(default_factory=dict)

    def __post_init__(self):
        chans = dict(self.channels)
        object.__setattr__(self, "t0", int(self.t0))
        object.__setattr__(self, "dt_seconds", int(self.dt_seconds))
        if self.dt_seconds <= 0:
            raise ValueError("dt_seconds must be a positive integer")
        lengths = {len(s) for s in chans.values()}
        if len(lengths) > 1:
            raise ValueError(f"stream channels differ in length: {sorted(lengths)}")
        for cid, s in chans.items():
            if cid != s.channel_id:
                raise ValueError(f"channel key {cid!r} does not match series id {s.channel_id!r}")
            if s.dt_seconds != self.dt_seconds:
                raise MismatchedInterval(f"{cid}: dt {s.dt_seconds} != stream dt {self.dt_seconds}")
            if len(s) and s.t0 != self.t0:
                raise ValueError(f"{cid}: t0 {s.t0} != stream t0 {self.t0}")
        object.__setattr__(self, "channels", MappingProxyType(chans))

    @classmethod
    def from_arrays(cls, machine_id, t0, dt_seconds, columns: Mapping[ChannelMeta, np.ndarray]):
        return cls(
            machine_id,
            t0,
            dt_seconds,
            {m.channel_id: Series(m, t0, dt_seconds, v) for m, v in columns.items()},
        )

    @property
    def length(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    def __len__(self):
        return self.length

    @property
    def end(self) -> Timestamp:
        return self.t0 + self.length * self.dt_seconds

    @property
    def extent(self) -> Optional[TimeRange]:
        return TimeRange(self.t0, self.end) if self.length else None

    def __getitem__(self, channel_id: str) -> Series:
        return self.channels[channel_id]

    def times(self) -> np.ndarray:
        return self.t0 + self.dt_seconds * np.arange(self.length, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, Stream):
            return NotImplemented
        return (
            self.machine_id == other.machine_id
            and self.dt_seconds == other.dt_seconds
            and list(self.channels) == list(other.channels)
            and all(self.channels[c] == other.channels[c] for c in self.channels)
            and (self.length == 0 or self.t0 == other.t0)
        )

    def __repr__(self):
        extent = str(self.extent) if self.extent else "empty"
        return f"Stream({self.machine_id!r}, {extent}, dt={self.dt_seconds}, channels={list(self.channels)})"


def slice_stream(stream: Stream, rng: TimeRange) -> Stream:
    """Restrict ``stream`` to ``rng``; nothing outside the stored extent is fabricated."""
    n, dt = stream.length, stream.dt_seconds
    lo = min(max(-((stream.t0 - rng.start) // dt), 0), n)
    t0 = stream.t0 + lo * dt
    return Stream(
        stream.machine_id,
        t0,
        dt,
        {cid: s.slice(rng) for cid, s in stream.channels.items()},
    )


def align(a: Series, b: Series) -> tuple[Series, Series]:
    """Cut two series down to their shared grid instants.

    Each output keeps its own missing markers; a gap in ``a`` does not
    punch a gap into ``b``.
    """
    if a.dt_seconds != b.dt_seconds:
        raise MismatchedInterval(f"dt {a.dt_seconds} != {b.dt_seconds}")
    dt = a.dt_seconds
    lo, hi = max(a.t0, b.t0), min(a.end, b.end)
    if (a.t0 - b.t0) % dt or lo >= hi:
        return a.with_values([], t0=lo), b.with_values([], t0=lo)
    rng = TimeRange(lo, hi)
    return a.slice(rng), b.slice(rng)


class Coverage(NamedTuple):
    present: int
    missing: int
    longest_gap_seconds: int


def coverage_stats(series: Series) -> Coverage:
    missing = np.isnan(series.values)
    _, lengths = runs(missing)
    longest = int(lengths.max()) if lengths.size else 0
    n_missing = int(missing.sum())
    return Coverage(len(series) - n_missing, n_missing, longest * series.dt_seconds)
