"""Day-aligned binary chunk store and stream export.

Layout::

    <root>/<machine_id>/<channel_id>/channel.json       ChannelMeta + dt
    <root>/<machine_id>/<channel_id>/<YYYY-MM-DD>.chunk

Chunk format (little endian)::

    b"ASTSA1" | u16 id_len | id (UTF-8) | i64 t0 | u32 dt_seconds | u32 count | count x f64

``t0`` is the UTC day start and ``count = 86400 / dt_seconds``.  Missing
slots hold the canonical quiet NaN ``0x7FF8000000000000``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterator, Optional, Sequence

import numpy as np
import polars as pl

from .core import (
    SECONDS_PER_DAY,
    ChannelMeta,
    Series,
    Stream,
    TimeRange,
    Timestamp,
    day_start,
)
from .errors import IntervalError, MismatchedInterval, OverwriteConflict, FormatError, UnknownChannel
from .ingest import ISO_FORMAT

MAGIC = b"ASTSA1"
_FIXED = struct.Struct("<qII")
CANONICAL_NAN = np.array([0x7FF8000000000000], dtype="<u8").view("<f8")[0]


def encode_chunk(channel_id: str, t0: Timestamp, dt_seconds: int, values: np.ndarray) -> bytes:
    cid = channel_id.encode("utf-8")
    vals = np.asarray(values, dtype="<f8").copy()
    vals[np.isnan(vals)] = CANONICAL_NAN
    return b"".join([
        MAGIC,
        struct.pack("<H", len(cid)),
        cid,
        _FIXED.pack(int(t0), int(dt_seconds), vals.shape[0]),
        vals.tobytes(),
    ])


def decode_chunk(blob: bytes) -> tuple[str, Timestamp, int, np.ndarray]:
    if blob[:6] != MAGIC:
        raise FormatError("bad chunk magic")
    (id_len,) = struct.unpack_from("<H", blob, 6)
    pos = 8 + id_len
    channel_id = blob[8:pos].decode("utf-8")
    t0, dt, count = _FIXED.unpack_from(blob, pos)
    pos += _FIXED.size
    if len(blob) - pos != 8 * count:
        raise FormatError(f"chunk for {channel_id} declares {count} values, holds {(len(blob) - pos) // 8}")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return channel_id, t0, dt, values


def _day_name(ts: Timestamp) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d")


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ChunkStore:
    """Persistent store of merged streams, one chunk per channel per UTC day."""

    def __init__(self, root):
        self.root = Path(root)

    def channel_dir(self, machine_id: str, channel_id: str) -> Path:
        return self.root / machine_id / channel_id

    def chunk_path(self, machine_id: str, channel_id: str, day: Timestamp) -> Path:
        return self.channel_dir(machine_id, channel_id) / f"{_day_name(day)}.chunk"

    def machines(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def channels(self, machine_id: str) -> list[str]:
        mdir = self.root / machine_id
        if not mdir.is_dir():
            return []
        return sorted(p.name for p in mdir.iterdir() if (p / "channel.json").exists())

    def channel_info(self, machine_id: str, channel_id: str) -> tuple[ChannelMeta, int]:
        path = self.channel_dir(machine_id, channel_id) / "channel.json"
        if not path.exists():
            raise UnknownChannel(f"no channel {channel_id!r} stored for machine {machine_id!r}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        return ChannelMeta.from_dict(doc["meta"], machine_id=machine_id), int(doc["dt_seconds"])

    def days(self, machine_id: str, channel_id: str) -> list[Timestamp]:
        cdir = self.channel_dir(machine_id, channel_id)
        out = []
        for p in cdir.glob("*.chunk"):
            d = datetime.strptime(p.stem, "%Y-%m-%d").replace(tzinfo=timezone.utc)
            out.append(int(d.timestamp()))
        return sorted(out)

    def extent(self, machine_id: str, channel_ids: Sequence[str]) -> Optional[TimeRange]:
        """First to last present sample over ``channel_ids``; ``None`` if nothing is stored.

        Only the outermost chunks holding data are read.
        """
        lo = hi = None
        for cid in channel_ids:
            days = self.days(machine_id, cid)
            if not days:
                continue
            _, dt = self.channel_info(machine_id, cid)
            for day in days:
                v = self._read_chunk(self.chunk_path(machine_id, cid, day), cid, day, dt)
                present = np.flatnonzero(~np.isnan(v))
                if present.size:
                    t = day + int(present[0]) * dt
                    lo = t if lo is None else min(lo, t)
                    break
            for day in reversed(days):
                v = self._read_chunk(self.chunk_path(machine_id, cid, day), cid, day, dt)
                present = np.flatnonzero(~np.isnan(v))
                if present.size:
                    t = day + (int(present[-1]) + 1) * dt
                    hi = t if hi is None else max(hi, t)
                    break
        if lo is None:
            return None
        return TimeRange(lo, hi)

    # ------------------------------------------------------------------ write

    def _read_chunk(self, path: Path, channel_id: str, day: Timestamp, dt: int) -> Optional[np.ndarray]:
        if not path.exists():
            return None
        cid, t0, cdt, values = decode_chunk(path.read_bytes())
        if cid != channel_id or t0 != day:
            raise FormatError(f"{path}: header names {cid}@{t0}, expected {channel_id}@{day}")
        if cdt != dt:
            raise MismatchedInterval(f"{path}: stored dt {cdt} != {dt}")
        return values

    def _plan(self, stream: Stream):
        dt = stream.dt_seconds
        if SECONDS_PER_DAY % dt or stream.t0 % dt:
            raise IntervalError(f"dt {dt}s with t0 {stream.t0} does not tile UTC days")
        per_day = SECONDS_PER_DAY // dt
        first = day_start(stream.t0)
        last = day_start(stream.end - 1)
        for cid, series in stream.channels.items():
            for day in range(first, last + 1, SECONDS_PER_DAY):
                # chunk slots [a, b) receive stream samples [a + off, b + off)
                off = (day - stream.t0) // dt
                a = max(0, -off)
                b = min(per_day, len(series) - off)
                yield cid, series, day, per_day, a, b, off

    def write_stream(self, stream: Stream) -> int:
        """Persist ``stream``; return the number of chunks it occupies.

        Missing slots in a stored chunk are filled silently; a present stored
        value that the stream would change (or erase) raises
        :class:`OverwriteConflict` before anything is written.
        """
        if stream.length == 0:
            return 0
        planned = []
        for cid, series, day, per_day, a, b, off in self._plan(stream):
            path = self.chunk_path(stream.machine_id, cid, day)
            existing = self._read_chunk(path, cid, day, stream.dt_seconds)
            incoming = series.values[a + off : b + off]
            if existing is None:
                merged = np.full(per_day, np.nan)
                merged[a:b] = incoming
            else:
                cur = existing[a:b]
                bad = ~np.isnan(cur) & (
                    np.isnan(incoming) | (cur.view(np.int64) != incoming.view(np.int64))
                )
                if bad.any():
                    i = int(np.flatnonzero(bad)[0])
                    raise OverwriteConflict(
                        f"{path}: slot {a + i} holds {cur[i]!r}, write would give {incoming[i]!r}"
                    )
                merged = existing.copy()
                fill = np.isnan(cur)
                merged[a:b][fill] = incoming[fill]
            planned.append((path, cid, day, existing, merged))

        for cid, series in stream.channels.items():
            info = {"meta": series.meta.to_dict(), "dt_seconds": stream.dt_seconds}
            path = self.channel_dir(stream.machine_id, cid) / "channel.json"
            blob = (json.dumps(info, indent=1, sort_keys=True) + "\n").encode("utf-8")
            if not path.exists() or path.read_bytes() != blob:
                _atomic_write(path, blob)
        for path, cid, day, existing, merged in planned:
            if existing is not None and np.array_equal(existing, merged, equal_nan=True):
                continue
            _atomic_write(path, encode_chunk(cid, day, stream.dt_seconds, merged))
        return len(planned)

    # ------------------------------------------------------------------- read

    def read_series(self, machine_id: str, channel_id: str, rng: TimeRange) -> Series:
        meta, dt = self.channel_info(machine_id, channel_id)
        t0 = -(-rng.start // dt) * dt
        n = max(0, -(-(rng.end - t0) // dt))
        out = np.full(n, np.nan)
        if n:
            per_day = SECONDS_PER_DAY // dt
            end = t0 + n * dt
            for day in range(day_start(t0), day_start(end - 1) + 1, SECONDS_PER_DAY):
                values = self._read_chunk(self.chunk_path(machine_id, channel_id, day),
                                          channel_id, day, dt)
                if values is None:
                    continue
                off = (day - t0) // dt  # chunk slot j lands at out[j + off]
                a, b = max(0, -off), min(per_day, n - off)
                out[a + off : b + off] = values[a:b]
        return Series(meta, t0, dt, out)

    def read_range(self, machine_id: str, channel_ids: Sequence[str], rng: TimeRange) -> Stream:
        """Stitch stored chunks into a stream over ``rng``; absent days read as missing."""
        series = {cid: self.read_series(machine_id, cid, rng) for cid in channel_ids}
        dts = {s.dt_seconds for s in series.values()}
        if len(dts) > 1:
            raise MismatchedInterval(f"channels stored with different dt: {sorted(dts)}")
        if not series:
            return Stream(machine_id, rng.start, 1, {})
        first = next(iter(series.values()))
        return Stream(machine_id, first.t0, first.dt_seconds, series)

    def iter_days(self, machine_id: str, channel_ids: Sequence[str], rng: TimeRange) -> Iterator[Stream]:
        """Yield ``rng`` as consecutive day-sized streams (bounded memory)."""
        day = day_start(rng.start)
        while day < rng.end:
            part = TimeRange(max(day, rng.start), min(day + SECONDS_PER_DAY, rng.end))
            yield self.read_range(machine_id, channel_ids, part)
            day += SECONDS_PER_DAY


# -------------------------------------------------------------------- export


def _frame(stream: Stream, lo: int, hi: int) -> pl.DataFrame:
    times = stream.times()[lo:hi]
    cols = {"timestamp": pl.from_epoch(pl.Series(times, dtype=pl.Int64), time_unit="s")}
    for cid, s in stream.channels.items():
        cols[cid] = pl.Series(cid, s.values[lo:hi], dtype=pl.Float64, nan_to_null=True)
    return pl.DataFrame(cols)


def _long_frame(stream: Stream, lo: int, hi: int) -> pl.DataFrame:
    ids = list(stream.channels)
    times = stream.times()[lo:hi]
    values = np.column_stack([stream.channels[c].values[lo:hi] for c in ids]).ravel()
    t = pl.from_epoch(pl.Series(np.repeat(times, len(ids)), dtype=pl.Int64), time_unit="s")
    return pl.DataFrame({
        "t": t.dt.strftime(ISO_FORMAT),
        "channel": pl.Series(np.tile(np.array(ids, dtype=object), len(times)), dtype=pl.String),
        "v": pl.Series(values, dtype=pl.Float64, nan_to_null=True),
    })


def export(stream: Stream, fmt: str, sink: BinaryIO, block_rows: int = SECONDS_PER_DAY) -> int:
    """Write ``stream`` to ``sink`` as ``csv`` or ``ndjson``; return bytes written.

    CSV has a ``timestamp,<channel_id>,...`` header and empty fields for gaps.
    NDJSON has one ``{"t", "channel", "v"}`` object per sample, time-major.
    """
    if fmt not in ("csv", "ndjson"):
        raise ValueError(f"unknown export format {fmt!r}")
    written = 0
    n = stream.length
    if fmt == "csv":
        header = ",".join(["timestamp", *stream.channels]) + "\n"
        blob = header.encode("utf-8")
        sink.write(blob)
        written += len(blob)
        for lo in range(0, n, block_rows):
            text = _frame(stream, lo, min(n, lo + block_rows)).write_csv(
                include_header=False, datetime_format=ISO_FORMAT, line_terminator="\n"
            )
            blob = text.encode("utf-8")
            sink.write(blob)
            written += len(blob)
    elif stream.channels:
        for lo in range(0, n, block_rows):
            blob = _long_frame(stream, lo, min(n, lo + block_rows)).write_ndjson().encode("utf-8")
            sink.write(blob)
            written += len(blob)
    return written
