"""Packet parsing, quality control and merging into contiguous streams.

A packet is a pair of files sharing a stem::

    <stem>.meta.json   sidecar: packet_id, machine_id, created_at, channels[]
    <stem>.data.csv    header ``timestamp,<channel_id>,...``, ISO-8601 UTC rows

Empty CSV fields are missing samples.  Quality control never raises; it
reports violations, drops duplicate rows and masks bad values.  Only broken
time structure or undeclared channels reject a packet outright.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import polars as pl

from .core import ChannelMeta, Series, Stream, Timestamp, format_iso, parse_iso
from .errors import FormatError, IntervalError, QcRejected, SchemaError

ISO_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

_REQUIRED_PACKET_FIELDS = ("packet_id", "machine_id", "created_at", "channels")
_REQUIRED_CHANNEL_FIELDS = (
    "channel_id", "name", "unit", "phys_min", "phys_max", "location", "hypothesis", "kind",
)


def _as_column(values) -> np.ma.MaskedArray:
    if isinstance(values, np.ma.MaskedArray):
        return np.ma.MaskedArray(np.asarray(values.data, dtype=np.float64),
                                 mask=np.ma.getmaskarray(values).copy())
    if isinstance(values, np.ndarray):
        data = values.astype(np.float64, copy=True)
        return np.ma.MaskedArray(data, mask=np.zeros(data.shape, dtype=bool))
    vals = list(values)
    mask = np.array([v is None for v in vals], dtype=bool)
    data = np.array([np.nan if v is None else v for v in vals], dtype=np.float64)
    return np.ma.MaskedArray(data, mask=mask)


@dataclass(frozen=True, eq=False)
class DataPacket:
    """One ingestion unit, typically a daily export of the machine-side buffer.

    Columns are masked arrays: the mask marks missing fields, while the data
    underneath may still hold non-finite garbage for quality control to find.
    """

    packet_id: str
    machine_id: str
    created_at: Timestamp
    channels: tuple
    timestamps: np.ndarray
    columns: Mapping[str, np.ma.MaskedArray] = field(default_factory=dict)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "channels", tuple(self.channels))
        cols = {cid: _as_column(v) for cid, v in dict(self.columns).items()}
        for cid, col in cols.items():
            if col.shape != ts.shape:
                raise ValueError(f"column {cid!r} has {col.shape[0]} rows, expected {ts.shape[0]}")
        object.__setattr__(self, "columns", cols)

    @classmethod
    def from_rows(cls, packet_id, machine_id, created_at, channels, rows):
        """Build a packet from ``(timestamp, {channel_id: value_or_None})`` rows."""
        channels = tuple(channels)
        rows = list(rows)
        ids = [c.channel_id for c in channels]
        for _, values in rows:
            ids.extend(k for k in values if k not in ids)
        columns = {cid: [r[1].get(cid) for r in rows] for cid in ids}
        return cls(packet_id, machine_id, created_at, channels, [r[0] for r in rows], columns)

    @property
    def n_rows(self) -> int:
        return self.timestamps.shape[0]

    @property
    def channel_ids(self) -> list[str]:
        return [c.channel_id for c in self.channels]

    def column_values(self, channel_id: str) -> np.ndarray:
        """Column as a float array with missing fields as ``NaN``."""
        col = self.columns.get(channel_id)
        if col is None:
            return np.full(self.n_rows, np.nan)
        return col.filled(np.nan)

    def rows(self):
        for i, t in enumerate(self.timestamps):
            yield int(t), {
                cid: (None if col.mask[i] else float(col.data[i])) for cid, col in self.columns.items()
            }


# --------------------------------------------------------------------- parsing


def _load_meta(meta_doc: bytes) -> dict:
    try:
        doc = json.loads(meta_doc.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata sidecar is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("metadata sidecar must be a JSON object")
    for key in _REQUIRED_PACKET_FIELDS:
        if key not in doc:
            raise SchemaError(f"metadata sidecar misses required field {key!r}")
    if not isinstance(doc["channels"], list):
        raise SchemaError("'channels' must be a list")
    return doc


def _channel_metas(doc: dict) -> list[ChannelMeta]:
    metas = []
    seen = set()
    for i, ch in enumerate(doc["channels"]):
        if not isinstance(ch, dict):
            raise SchemaError(f"channels[{i}] must be an object")
        for key in _REQUIRED_CHANNEL_FIELDS:
            if key not in ch:
                raise SchemaError(f"channels[{i}] misses required field {key!r}")
        try:
            meta = ChannelMeta.from_dict(ch, machine_id=doc["machine_id"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"channels[{i}]: {exc}") from exc
        if meta.channel_id in seen:
            raise SchemaError(f"channels[{i}]: duplicate channel_id {meta.channel_id!r}")
        seen.add(meta.channel_id)
        metas.append(meta)
    return metas


def parse_timestamps(column: pl.Series) -> np.ndarray:
    try:
        parsed = column.str.strptime(pl.Datetime("ms"), ISO_FORMAT, strict=True)
    except pl.exceptions.PolarsError as exc:
        raise FormatError(f"bad timestamp column: {str(exc).splitlines()[0]}") from exc
    if parsed.null_count():
        raise FormatError("empty timestamp field")
    return parsed.dt.epoch("s").to_numpy().astype(np.int64)


def parse_packet(meta_doc: bytes, data_doc: bytes) -> DataPacket:
    """Decode a sidecar/CSV pair into a :class:`DataPacket`.

    Raises :class:`FormatError` for undecodable input and :class:`SchemaError`
    for missing metadata or columns not declared in the sidecar.
    """
    doc = _load_meta(meta_doc)
    metas = _channel_metas(doc)
    try:
        created_at = parse_iso(str(doc["created_at"]))
    except ValueError as exc:
        raise SchemaError(f"created_at: {exc}") from exc

    head, _, _ = data_doc.partition(b"\n")
    try:
        header = head.decode("utf-8").rstrip("\r").split(",")
    except UnicodeDecodeError as exc:
        raise FormatError(f"data table is not UTF-8: {exc}") from exc
    if not header or header[0] != "timestamp":
        raise FormatError("data table header must start with 'timestamp'")
    if len(set(header)) != len(header):
        raise FormatError("duplicate column in data table header")
    declared = {m.channel_id for m in metas}
    for cid in header[1:]:
        if cid not in declared:
            raise SchemaError(f"data column {cid!r} is not declared in the sidecar")

    schema = {"timestamp": pl.String, **{cid: pl.Float64 for cid in header[1:]}}
    try:
        df = pl.read_csv(io.BytesIO(data_doc), schema=schema, has_header=True)
    except pl.exceptions.PolarsError as exc:
        raise FormatError(f"malformed data table: {str(exc).splitlines()[0]}") from exc

    timestamps = parse_timestamps(df["timestamp"])
    columns = {}
    for cid in header[1:]:
        col = df[cid]
        columns[cid] = np.ma.MaskedArray(
            col.fill_null(np.nan).to_numpy().astype(np.float64), mask=col.is_null().to_numpy()
        )
    return DataPacket(
        packet_id=str(doc["packet_id"]),
        machine_id=str(doc["machine_id"]),
        created_at=created_at,
        channels=metas,
        timestamps=timestamps,
        columns=columns,
    )


def packet_documents(packet: DataPacket) -> tuple[bytes, bytes]:
    """Serialize a packet into its ``(meta_doc, data_doc)`` pair."""
    meta = {
        "packet_id": packet.packet_id,
        "machine_id": packet.machine_id,
        "created_at": format_iso(packet.created_at),
        "channels": [c.to_dict() for c in packet.channels],
    }
    meta_doc = (json.dumps(meta, indent=1) + "\n").encode("utf-8")
    cols = {"timestamp": pl.from_epoch(pl.Series(packet.timestamps, dtype=pl.Int64), time_unit="s")}
    for cid in packet.channel_ids:
        if cid in packet.columns:
            col = packet.columns[cid]
            # NaN in memory means missing, which the CSV form spells as an empty field
            missing = np.ma.getmaskarray(col) | np.isnan(col.data)
            cols[cid] = pl.Series(cid, col.data, dtype=pl.Float64).set(pl.Series(missing), None)
    df = pl.DataFrame(cols)
    data_doc = df.write_csv(datetime_format=ISO_FORMAT, line_terminator="\n").encode("utf-8")
    return meta_doc, data_doc


def write_packet(packet: DataPacket, out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_doc, data_doc = packet_documents(packet)
    meta_path = out_dir / f"{stem}.meta.json"
    data_path = out_dir / f"{stem}.data.csv"
    meta_path.write_bytes(meta_doc)
    data_path.write_bytes(data_doc)
    return meta_path, data_path


def find_packets(packet_dir) -> list[tuple[str, Path, Path]]:
    """List ``(stem, meta_path, data_path)`` for every packet in a drop directory."""
    packet_dir = Path(packet_dir)
    if not packet_dir.is_dir():
        raise FileNotFoundError(f"packet directory {packet_dir} does not exist")
    metas = {p.name[: -len(".meta.json")]: p for p in packet_dir.glob("*.meta.json")}
    datas = {p.name[: -len(".data.csv")]: p for p in packet_dir.glob("*.data.csv")}
    unpaired = sorted(set(metas) ^ set(datas))
    if unpaired:
        raise FormatError(f"packet files without partner: {', '.join(unpaired)}")
    return [(stem, metas[stem], datas[stem]) for stem in sorted(metas)]


def read_packet(meta_path, data_path) -> DataPacket:
    return parse_packet(Path(meta_path).read_bytes(), Path(data_path).read_bytes())


def packet_from_stream(stream: Stream, packet_id: str, created_at: Timestamp) -> DataPacket:
    """Re-export a stream as a single packet (rows on every grid instant)."""
    return DataPacket(
        packet_id=packet_id,
        machine_id=stream.machine_id,
        created_at=created_at,
        channels=[s.meta for s in stream.channels.values()],
        timestamps=stream.times(),
        columns={
            cid: np.ma.MaskedArray(s.values, mask=np.isnan(s.values))
            for cid, s in stream.channels.items()
        },
    )


# ------------------------------------------------------------- quality control


class QcRule(str, enum.Enum):
    NonMonotonicTime = "NonMonotonicTime"
    DuplicateTimestamp = "DuplicateTimestamp"
    OutOfPhysicalRange = "OutOfPhysicalRange"
    NonFiniteValue = "NonFiniteValue"
    UndeclaredChannel = "UndeclaredChannel"

    def __str__(self):
        return self.value


FATAL_RULES = frozenset({QcRule.NonMonotonicTime, QcRule.UndeclaredChannel})


class Violation(NamedTuple):
    rule: QcRule
    channel_id: str
    timestamp: Timestamp
    detail: str


@dataclass(frozen=True)
class QcReport:
    packet_id: str
    violations: tuple
    accepted: bool
    #: sanitized copy of the packet (duplicates dropped, bad samples masked);
    #: ``None`` when the packet is rejected
    packet: Optional[DataPacket] = None

    def counts(self) -> dict:
        out: dict = {}
        for v in self.violations:
            out[v.rule.value] = out.get(v.rule.value, 0) + 1
        return out

    def summary(self) -> str:
        state = "accepted" if self.accepted else "REJECTED"
        counts = ", ".join(f"{k} x{n}" for k, n in sorted(self.counts().items()))
        return f"packet {self.packet_id}: {state}" + (f" ({counts})" if counts else "")


def quality_check(p: DataPacket) -> QcReport:
    violations: list[Violation] = []
    ts = p.timestamps
    first_ts = int(ts[0]) if ts.size else p.created_at

    declared = {c.channel_id: c for c in p.channels}
    for cid in p.columns:
        if cid not in declared:
            violations.append(Violation(QcRule.UndeclaredChannel, cid, first_ts,
                                        "column not declared in sidecar"))

    back = np.flatnonzero(ts[1:] < ts[:-1]) + 1
    for i in back:
        violations.append(Violation(QcRule.NonMonotonicTime, "-", int(ts[i]),
                                    f"row {i} precedes previous row {format_iso(ts[i - 1])}"))

    _, first_idx = np.unique(ts, return_index=True)
    keep = np.zeros(ts.shape, dtype=bool)
    keep[first_idx] = True
    if not keep.all():
        first_of = {int(ts[i]): int(i) for i in first_idx}
        for i in np.flatnonzero(~keep):
            violations.append(Violation(QcRule.DuplicateTimestamp, "-", int(ts[i]),
                                        f"row {i} repeats row {first_of[int(ts[i])]}"))

    accepted = not any(v.rule in FATAL_RULES for v in violations)
    if not accepted:
        return QcReport(p.packet_id, tuple(violations), False, None)

    kept_ts = ts[keep]
    columns = {}
    for cid, col in p.columns.items():
        meta = declared[cid]
        data = col.data[keep]
        mask = np.ma.getmaskarray(col)[keep].copy()
        with np.errstate(invalid="ignore"):
            nonfinite = ~mask & ~np.isfinite(data)
            outside = ~mask & ~nonfinite & ((data < meta.phys_min) | (data > meta.phys_max))
        for i in np.flatnonzero(nonfinite):
            violations.append(Violation(QcRule.NonFiniteValue, cid, int(kept_ts[i]),
                                        f"value {data[i]!r}"))
        for i in np.flatnonzero(outside):
            violations.append(Violation(
                QcRule.OutOfPhysicalRange, cid, int(kept_ts[i]),
                f"value {data[i]!r} outside [{meta.phys_min}, {meta.phys_max}]"))
        mask |= nonfinite | outside
        data = np.where(mask, np.nan, data)
        columns[cid] = np.ma.MaskedArray(data, mask=mask)

    clean = replace(p, timestamps=kept_ts, columns=columns)
    return QcReport(p.packet_id, tuple(violations), True, clean)


# ---------------------------------------------------------------------- merge


class MergeConflict(NamedTuple):
    channel_id: str
    timestamp: Timestamp
    existing: float
    incoming: float


def _infer_interval(stamp_arrays: Sequence[np.ndarray], nominal_dt: int) -> tuple[int, int, int]:
    """Return ``(t_min, t_max, gcd)`` over all rows, checking the nominal grid."""
    t_min = min(int(a.min()) for a in stamp_arrays)
    t_max = max(int(a.max()) for a in stamp_arrays)
    g = 0
    for a in stamp_arrays:
        g = math.gcd(g, int(np.gcd.reduce(a - t_min)))
    if g == 0:
        g = nominal_dt
    if g % nominal_dt or t_min % nominal_dt:
        raise IntervalError(
            f"row spacing gcd {g}s (origin {format_iso(t_min)}) is off the nominal {nominal_dt}s grid"
        )
    return t_min, t_max, g


def merge_packets(
    packets: Iterable[DataPacket], machine_id: str, nominal_dt: int = 1
) -> tuple[Stream, list[MergeConflict]]:
    """Assemble packets into one gap-aware stream.

    Packets are quality-checked and applied in ``created_at`` order (ties
    broken by ``packet_id``), so the result does not depend on input order.
    Overlapping samples that differ bitwise resolve to the latest packet and
    are reported as :class:`MergeConflict`.
    """
    cleaned = []
    for p in packets:
        if p.machine_id != machine_id:
            raise SchemaError(f"packet {p.packet_id} belongs to {p.machine_id!r}, not {machine_id!r}")
        report = quality_check(p)
        if not report.accepted:
            raise QcRejected(report.summary())
        cleaned.append(report.packet)
    cleaned.sort(key=lambda q: (q.created_at, q.packet_id))

    metas: dict[str, ChannelMeta] = {}
    for p in cleaned:
        for m in p.channels:
            metas[m.channel_id] = replace(m, machine_id=machine_id)

    stamped = [p.timestamps for p in cleaned if p.n_rows]
    if not stamped:
        return Stream(machine_id, 0, nominal_dt,
                      {cid: Series(m, 0, nominal_dt, []) for cid, m in metas.items()}), []
    t0, t_max, _ = _infer_interval(stamped, nominal_dt)
    dt = nominal_dt
    n = (t_max - t0) // dt + 1

    arrays = {cid: np.full(n, np.nan) for cid in metas}
    conflicts: list[MergeConflict] = []
    for p in cleaned:
        if not p.n_rows:
            continue
        idx = (p.timestamps - t0) // dt
        for cid in p.channel_ids:
            if cid not in p.columns:
                continue
            incoming = p.column_values(cid)
            target = arrays[cid]
            current = target[idx]
            both = ~np.isnan(current) & ~np.isnan(incoming)
            differ = both & (current.view(np.int64) != incoming.view(np.int64))
            for i in np.flatnonzero(differ):
                conflicts.append(MergeConflict(cid, int(p.timestamps[i]), float(current[i]),
                                               float(incoming[i])))
            target[idx] = np.where(np.isnan(incoming), current, incoming)

    series = {cid: Series(metas[cid], t0, dt, arrays[cid]) for cid in metas}
    return Stream(machine_id, t0, dt, series), conflicts
