"""Deterministic synthetic telemetry with ground-truth manifests.

A scenario is a JSON document::

    {"seed": 7, "machine_id": "brr1", "start": "2024-01-01", "days": 3,
     "dt_seconds": 1,
     "channels": [{"channel_id": "load", "generator": "sinusoid",
                   "params": {...}, "unit": "kN", "phys_min": 0, "phys_max": 500}],
     "injections": [{"kind": "gap", "params": {...}, "schedule": {...}}]}

Every random draw comes from a Philox counter-based stream keyed on the
scenario seed and a ``(purpose, channel, day)`` tag, so any day can be
regenerated in isolation and the same seed always yields the same bytes.
The only state carried across days is the position of random walks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import SECONDS_PER_DAY, ChannelMeta, Timestamp, format_iso, parse_iso
from .errors import SpecError
from .ingest import DataPacket, read_packet, write_packet

GENERATORS = ("constant", "ramp", "sinusoid", "random_walk", "duty_cycle")
INJECTIONS = ("event_pattern", "sporadic_spike", "quadrant_bias", "gap")

# purposes for stream keys
_BASE, _EVENT, _SPIKE, _QUADRANT = 1, 2, 3, 4

# working -> overload -> idle; with bins idle<=100, working<=250 the final
# onset is where `noun:working verb:goto_overload noun:overload[dur<60]
# verb:goto_idle` completes
DEFAULT_EVENT_LEVELS = ((180.0, 30), (320.0, 10), (50.0, 60))

DECIMALS = 3


def rng_for(seed: int, purpose: int, channel: int, day: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (purpose << 48) | (channel << 24) | day], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    days: int
    dt_seconds: int
    channels: tuple
    injections: tuple = ()
    machine_id: str = "synthetic"
    start: Timestamp = 1704067200  # 2024-01-01

    def __post_init__(self):
        if self.days <= 0:
            raise SpecError("days must be positive")
        if self.dt_seconds <= 0 or SECONDS_PER_DAY % self.dt_seconds:
            raise SpecError(f"dt_seconds {self.dt_seconds} must divide one day")
        if self.start % SECONDS_PER_DAY:
            raise SpecError("start must be a UTC midnight")
        ids = [c["channel_id"] for c in self.channels]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate channel ids")
        for c in self.channels:
            if c.get("generator") not in GENERATORS:
                raise SpecError(f"{c['channel_id']}: unknown generator {c.get('generator')!r}")
        for inj in self.injections:
            if inj.get("kind") not in INJECTIONS:
                raise SpecError(f"unknown injection kind {inj.get('kind')!r}")
            for key in ("channel", "angle_channel", "load_channel"):
                ref = inj.get("params", {}).get(key)
                if ref is not None and ref not in ids:
                    raise SpecError(f"{inj['kind']}: unknown channel {ref!r}")

    @property
    def end(self) -> Timestamp:
        return self.start + self.days * SECONDS_PER_DAY

    @property
    def samples_per_day(self) -> int:
        return SECONDS_PER_DAY // self.dt_seconds

    def channel_index(self, channel_id: str) -> int:
        return [c["channel_id"] for c in self.channels].index(channel_id)

    def metas(self) -> list[ChannelMeta]:
        out = []
        for c in self.channels:
            out.append(ChannelMeta(
                channel_id=c["channel_id"],
                name=c.get("name", c["channel_id"]),
                unit=c.get("unit", "1"),
                phys_min=float(c.get("phys_min", -1e6)),
                phys_max=float(c.get("phys_max", 1e6)),
                location=c.get("location", "synthetic"),
                hypothesis=c.get("hypothesis", "generated test signal"),
                kind=c.get("kind", "sensor"),
                machine_id=self.machine_id,
            ))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        try:
            start = d.get("start", "2024-01-01")
            return cls(
                seed=int(d["seed"]),
                days=int(d["days"]),
                dt_seconds=int(d.get("dt_seconds", 1)),
                channels=tuple(d["channels"]),
                injections=tuple(d.get("injections", ())),
                machine_id=d.get("machine_id", "synthetic"),
                start=parse_iso(start) if isinstance(start, str) else int(start),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"invalid scenario: {exc}") from None

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Manifest:
    machine_id: str
    start: Timestamp
    end: Timestamp
    dt_seconds: int
    packets: list = field(default_factory=list)
    events: list = field(default_factory=list)  # event instants (onset of the final stamp level)
    spikes: list = field(default_factory=list)  # (channel_id, t)
    gaps: list = field(default_factory=list)  # (channel_id, start, end)
    quadrant: Optional[dict] = None

    def gap_samples(self, channel_ids) -> int:
        """Number of grid instants missing in at least one of ``channel_ids``."""
        spans = sorted((a, b) for c, a, b in self.gaps if c in set(channel_ids))
        total, cur_a, cur_b = 0, None, None
        for a, b in spans:
            if cur_b is None or a > cur_b:
                if cur_b is not None:
                    total += cur_b - cur_a
                cur_a, cur_b = a, b
            else:
                cur_b = max(cur_b, b)
        if cur_b is not None:
            total += cur_b - cur_a
        return total // self.dt_seconds

    def to_dict(self) -> dict:
        return {
            "machine_id": self.machine_id,
            "start": format_iso(self.start),
            "end": format_iso(self.end),
            "dt_seconds": self.dt_seconds,
            "packets": self.packets,
            "events": [format_iso(t) for t in self.events],
            "spikes": [{"channel": c, "t": format_iso(t)} for c, t in self.spikes],
            "gaps": [{"channel": c, "start": format_iso(a), "end": format_iso(b)} for c, a, b in self.gaps],
            "quadrant": self.quadrant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(
            machine_id=d["machine_id"],
            start=parse_iso(d["start"]),
            end=parse_iso(d["end"]),
            dt_seconds=d["dt_seconds"],
            packets=list(d["packets"]),
            events=[parse_iso(t) for t in d["events"]],
            spikes=[(s["channel"], parse_iso(s["t"])) for s in d["spikes"]],
            gaps=[(g["channel"], parse_iso(g["start"]), parse_iso(g["end"])) for g in d["gaps"]],
            quadrant=d.get("quadrant"),
        )

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ------------------------------------------------------------------ generators


def _base_day(spec: ScenarioSpec, ch: dict, ci: int, day: int, times: np.ndarray, carry: dict) -> np.ndarray:
    p = ch.get("params", {})
    kind = ch["generator"]
    n = times.shape[0]
    rng = rng_for(spec.seed, _BASE, ci, day)
    noise = float(p.get("noise", 0.0))
    elapsed = (times - spec.start).astype(np.float64)
    if kind == "constant":
        v = np.full(n, float(p.get("value", 0.0)))
    elif kind == "ramp":
        v = float(p.get("start", 0.0)) + float(p.get("slope", 1.0)) * elapsed
        if "modulo" in p:
            v = np.mod(v, float(p["modulo"]))
    elif kind == "sinusoid":
        phase = math.radians(float(p.get("phase_deg", 0.0)))
        v = float(p.get("mean", 0.0)) + float(p.get("amplitude", 1.0)) * np.sin(
            2 * np.pi * elapsed / float(p.get("period_s", 3600.0)) + phase)
    elif kind == "random_walk":
        lo, hi = float(p.get("lo", -1e3)), float(p.get("hi", 1e3))
        x0 = carry.get(ci, float(p.get("start", (lo + hi) / 2)))
        x = x0 + np.cumsum(rng.uniform(-1.0, 1.0, n) * float(p.get("step", 1.0)))
        carry[ci] = float(x[-1])
        # fold the unbounded walk into [lo, hi] by reflection
        w = hi - lo
        y = np.mod(x - lo, 2 * w)
        v = lo + (w - np.abs(y - w))
    else:  # duty_cycle
        period = float(p.get("period_s", 1800.0))
        on = np.mod(elapsed, period) < float(p.get("duty", 0.5)) * period
        v = np.where(on, float(p.get("high", 1.0)), float(p.get("low", 0.0)))
    if noise and kind != "random_walk":
        v = v + rng.uniform(-noise, noise, n)
    return v


def _event_times(spec: ScenarioSpec, inj: dict) -> list[tuple[Timestamp, list]]:
    """Stamp start times, stratified over the extent."""
    p, sched = inj.get("params", {}), inj.get("schedule", {})
    levels = [(float(v), int(d)) for v, d in p.get("levels", DEFAULT_EVENT_LEVELS)]
    length = sum(d for _, d in levels)
    dt = spec.dt_seconds
    if "at" in sched:
        starts = [parse_iso(t) if isinstance(t, str) else spec.start + int(t) for t in sched["at"]]
    else:
        count = int(sched.get("count", 1))
        margin = int(sched.get("margin_s", 600))
        stratum = (spec.end - spec.start) // count
        if stratum < length + 2 * margin:
            raise SpecError(f"{count} event stamps of {length}s do not fit with {margin}s margins")
        rng = rng_for(spec.seed, _EVENT, spec.channel_index(p["channel"]), 0)
        offs = rng.integers(margin, stratum - margin - length, size=count, endpoint=True)
        starts = [spec.start + i * stratum + int(o) // dt * dt for i, o in enumerate(offs)]
    for s in starts:
        if s % dt or s < spec.start or s + length > spec.end:
            raise SpecError(f"event stamp at {format_iso(s)} is off the grid or outside the extent")
    return [(s, levels) for s in starts]


def _quadrant_params(inj: dict) -> dict:
    p = inj.get("params", {})
    target = float(p.get("target_share", 0.32))
    beta = float(p.get("load_bias", 0.01))
    if not 0 < target < 1:
        raise SpecError("target_share must lie in (0, 1)")
    # share = f(1+b) / (f(1+b) + 1 - f) for dwell fraction f; solve for f
    frac = target / (1 + beta - target * beta)
    share = frac * (1 + beta) / (frac * (1 + beta) + 1 - frac)
    base = float(p.get("load_base", 100.0))
    u = float(p.get("daily_variation", 0.3))
    e = float(p.get("noise", 2.0))
    return {
        "angle_channel": p["angle_channel"],
        "load_channel": p["load_channel"],
        "quadrant": int(p.get("quadrant", 1)),
        "dwell_fraction": frac,
        "load_bias": beta,
        "load_base": base,
        "daily_variation": u,
        "noise": e,
        "dwell_s": list(p.get("dwell_s", (30, 300))),
        "share": share,
        # daily mean inside the quadrant stays inside this band
        "daily_band": [base * (1 - u) * (1 + beta) - e, base * (1 + u) * (1 + beta) + e],
    }


def _apply_quadrant(spec, q: dict, day: int, cols: dict) -> None:
    n = spec.samples_per_day
    rng = rng_for(spec.seed, _QUADRANT, spec.channel_index(q["angle_channel"]), day)
    lo, hi = q["dwell_s"]
    lengths = []
    total = 0
    while total < n:
        d = int(rng.integers(lo, hi, endpoint=True)) // spec.dt_seconds or 1
        lengths.append(d)
        total += d
    lengths = np.array(lengths)
    k = lengths.shape[0]
    inq = rng.random(k) < q["dwell_fraction"]
    other = (q["quadrant"] + rng.integers(1, 4, size=k)) % 4
    quad = np.where(inq, q["quadrant"], other)
    centre = 90.0 * quad + rng.uniform(5.0, 85.0, size=k)
    angle = np.repeat(centre, lengths)[:n] + rng.uniform(-4.0, 4.0, n)
    in_q = np.repeat(inq, lengths)[:n]
    factor = 1 + q["daily_variation"] * rng.uniform(-1.0, 1.0)
    load = q["load_base"] * factor * np.where(in_q, 1 + q["load_bias"], 1.0)
    load = load + rng.uniform(-q["noise"], q["noise"], n)
    cols[q["angle_channel"]] = angle
    cols[q["load_channel"]] = load


def _spike_times(spec, inj: dict, day: int, values: np.ndarray, blocked: np.ndarray) -> list[int]:
    p, sched = inj.get("params", {}), inj.get("schedule", {})
    lo, hi = sched.get("per_day", (2, 5))
    sep = int(sched.get("min_separation_s", 600)) // spec.dt_seconds
    margin = int(sched.get("margin_s", 300)) // spec.dt_seconds
    rng = rng_for(spec.seed, _SPIKE, spec.channel_index(p["channel"]), day)
    count = int(rng.integers(lo, hi, endpoint=True))
    n = values.shape[0]
    chosen: list[int] = []
    while len(chosen) < count:
        i = int(rng.integers(margin, n - margin))
        if all(abs(i - j) >= sep for j in chosen) and not blocked[i] and not np.isnan(values[i]):
            chosen.append(i)
    return sorted(chosen)


def generate_day(spec: ScenarioSpec, day: int, carry: dict, events: list, quadrant: Optional[dict],
                 gaps: list = ()):
    """Columns and ground truth for day index ``day``."""
    dt = spec.dt_seconds
    t0 = spec.start + day * SECONDS_PER_DAY
    times = t0 + dt * np.arange(spec.samples_per_day, dtype=np.int64)
    metas = {m.channel_id: m for m in spec.metas()}
    cols = {ch["channel_id"]: _base_day(spec, ch, ci, day, times, carry) for ci, ch in enumerate(spec.channels)}

    if quadrant is not None:
        _apply_quadrant(spec, quadrant, day, cols)
    # samples that spikes must avoid: stamped episodes and gaps
    blocked = {cid: np.zeros(times.shape[0], dtype=bool) for cid in cols}
    event_instants = []
    for channel, start, levels, noise in events:
        rng = rng_for(spec.seed, _EVENT, spec.channel_index(channel), day + 1)
        t = start
        for value, dur in levels:
            a, b = max(t, t0), min(t + dur, t0 + SECONDS_PER_DAY)
            if a < b:
                sl = slice((a - t0) // dt, (b - t0) // dt)
                cols[channel][sl] = value + rng.uniform(-noise, noise, sl.stop - sl.start)
                blocked[channel][sl] = True
            t += dur
        onset = start + sum(d for _, d in levels[:-1])
        if t0 <= onset < t0 + SECONDS_PER_DAY:
            event_instants.append(onset)

    for cid, v in cols.items():
        m = metas[cid]
        cols[cid] = np.round(np.clip(v, m.phys_min, m.phys_max), DECIMALS)

    gap_slices = []
    for cid, gs, ge in gaps:
        a, b = max(gs, t0), min(ge, t0 + SECONDS_PER_DAY)
        if a < b:
            sl = slice((a - t0) // dt, (b - t0) // dt)
            gap_slices.append((cid, sl))
            blocked[cid][sl] = True

    spikes = []
    for inj in spec.injections:
        if inj["kind"] != "sporadic_spike":
            continue
        cid = inj["params"]["channel"]
        offset = float(inj["params"].get("offset", 50.0))
        m = metas[cid]
        v = cols[cid]
        for i in _spike_times(spec, inj, day, v, blocked[cid]):
            up = v[i] + offset
            v[i] = round(up if up <= m.phys_max else v[i] - offset, DECIMALS)
            spikes.append((cid, int(times[i])))

    for cid, sl in gap_slices:
        cols[cid][sl] = np.nan
    return times, cols, event_instants, spikes


def _all_gaps(spec: ScenarioSpec) -> list:
    out = []
    for inj in spec.injections:
        if inj["kind"] != "gap":
            continue
        chans = inj.get("params", {}).get("channels") or [c["channel_id"] for c in spec.channels]
        for g in inj.get("schedule", {}).get("ranges", ()):
            gs = parse_iso(g["start"]) if isinstance(g["start"], str) else spec.start + int(g["start"])
            ge = gs + int(g["duration_s"])
            if gs % spec.dt_seconds or ge % spec.dt_seconds or gs < spec.start or ge > spec.end:
                raise SpecError(f"gap {format_iso(gs)}+{g['duration_s']}s is off the grid or outside the extent")
            out.extend((c, gs, ge) for c in chans)
    return out


def generate(spec: ScenarioSpec, out_dir) -> Manifest:
    """Write one packet pair per day plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gaps = _all_gaps(spec)
    events = []
    for inj in spec.injections:
        if inj["kind"] == "event_pattern":
            ch = inj["params"]["channel"]
            noise = float(inj["params"].get("noise", 0.0))
            events.extend((ch, s, lv, noise) for s, lv in _event_times(spec, inj))
    for ch, s, lv, _ in events:
        stop = s + sum(d for _, d in lv)
        if any(c == ch and a < stop and s < b for c, a, b in gaps):
            raise SpecError(f"event stamp at {format_iso(s)} overlaps a gap")
    quads = [_quadrant_params(i) for i in spec.injections if i["kind"] == "quadrant_bias"]
    if len(quads) > 1:
        raise SpecError("at most one quadrant_bias injection per scenario")
    quadrant = quads[0] if quads else None

    manifest = Manifest(spec.machine_id, spec.start, spec.end, spec.dt_seconds, gaps=gaps, quadrant=quadrant)
    metas = spec.metas()
    carry: dict = {}
    for day in range(spec.days):
        times, cols, ev, spikes = generate_day(spec, day, carry, events, quadrant, gaps)
        day_t0 = int(times[0])
        stem = f"{spec.machine_id}_{format_iso(day_t0)[:10]}"
        packet = DataPacket(
            packet_id=stem,
            machine_id=spec.machine_id,
            created_at=day_t0 + SECONDS_PER_DAY + 3600,
            channels=metas,
            timestamps=times,
            columns={cid: np.ma.MaskedArray(v, mask=np.isnan(v)) for cid, v in cols.items()},
        )
        write_packet(packet, out, stem)
        manifest.packets.append(stem)
        manifest.events.extend(ev)
        manifest.spikes.extend(spikes)
    manifest.events.sort()
    _self_check(spec, manifest, out)
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def _self_check(spec: ScenarioSpec, manifest: Manifest, out: Path) -> None:
    """Re-read a sample of emitted packets and confirm the manifest describes them."""
    days = {0, spec.days - 1}
    days |= {(t - spec.start) // SECONDS_PER_DAY for _, t in manifest.spikes[:3]}
    days |= {(a - spec.start) // SECONDS_PER_DAY for _, a, _ in manifest.gaps[:3]}
    for day in sorted(days):
        stem = manifest.packets[day]
        p = read_packet(out / f"{stem}.meta.json", out / f"{stem}.data.csv")
        t0 = int(p.timestamps[0])
        for cid, t in manifest.spikes:
            if t0 <= t < t0 + SECONDS_PER_DAY and np.isnan(p.column_values(cid)[(t - t0) // spec.dt_seconds]):
                raise SpecError(f"self-check: spike {cid}@{format_iso(t)} missing from {stem}")
        for cid, a, b in manifest.gaps:
            lo, hi = max(a, t0), min(b, t0 + SECONDS_PER_DAY)
            if lo < hi:
                seg = p.column_values(cid)[(lo - t0) // spec.dt_seconds : (hi - t0) // spec.dt_seconds]
                if not np.isnan(seg).all():
                    raise SpecError(f"self-check: gap {cid}@{format_iso(a)} not empty in {stem}")


# -------------------------------------------------------------- stock scenarios


def three_day_scenario(seed: int = 3) -> dict:
    return {
        "seed": seed, "machine_id": "brr1", "start": "2024-03-01", "days": 3, "dt_seconds": 1,
        "channels": [
            {"channel_id": "slew_angle", "generator": "ramp", "unit": "deg", "phys_min": 0, "phys_max": 360,
             "params": {"slope": 0.01, "modulo": 360}},
            {"channel_id": "bucket_load", "generator": "random_walk", "unit": "kN", "phys_min": 0,
             "phys_max": 500, "params": {"lo": 20, "hi": 300, "step": 0.5}},
        ],
    }


def incident_scenario(seed: int = 5, days: int = 61, events: int = 63, extra_channels: int = 9) -> dict:
    """Work cycles on ``boom_load`` with stamped working/overload/idle episodes."""
    channels = [{
        "channel_id": "boom_load", "generator": "duty_cycle", "unit": "kN", "phys_min": 0, "phys_max": 1000,
        "params": {"low": 50, "high": 180, "period_s": 1800, "duty": 0.6, "noise": 5},
    }]
    kinds = ["sinusoid", "random_walk", "constant", "ramp"]
    for i in range(extra_channels):
        kind = kinds[i % len(kinds)]
        params = {
            "sinusoid": {"mean": 50, "amplitude": 20, "period_s": 7200, "noise": 1},
            "random_walk": {"lo": 0, "hi": 100, "step": 0.2},
            "constant": {"value": 42.5},
            "ramp": {"slope": 0.001, "modulo": 360},
        }[kind]
        channels.append({"channel_id": f"aux_{i:02d}", "generator": kind, "phys_min": -1000,
                         "phys_max": 1000, "params": params})
    return {
        "seed": seed, "machine_id": "brr1", "start": "2024-01-01", "days": days, "dt_seconds": 1,
        "channels": channels,
        "injections": [{"kind": "event_pattern", "params": {"channel": "boom_load", "noise": 5},
                        "schedule": {"count": events, "margin_s": 600}}],
    }


INCIDENT_PATTERN = "noun:working verb:goto_overload noun:overload[dur<60] verb:goto_idle"
INCIDENT_NOUN_BINS = ((100.0, "idle"), (250.0, "working"), (math.inf, "overload"))


def year_scenario(seed: int = 11, days: int = 365, target_share: float = 0.32) -> dict:
    """Slew angle and bearing load with a quadrant that carries slightly more load."""
    return {
        "seed": seed, "machine_id": "brr1", "start": "2023-01-01", "days": days, "dt_seconds": 1,
        "channels": [
            {"channel_id": "slew_angle", "generator": "constant", "unit": "deg", "phys_min": -360,
             "phys_max": 720, "params": {"value": 0}},
            {"channel_id": "slew_load", "generator": "constant", "unit": "kN", "phys_min": 0,
             "phys_max": 1000, "params": {"value": 0}},
        ],
        "injections": [
            {"kind": "quadrant_bias",
             "params": {"angle_channel": "slew_angle", "load_channel": "slew_load", "quadrant": 1,
                        "target_share": target_share, "load_bias": 0.01, "load_base": 100.0,
                        "daily_variation": 0.3, "noise": 2.0}},
            {"kind": "gap", "params": {"channels": ["slew_load"]},
             "schedule": {"ranges": [{"start": (days * 40 // 365) * SECONDS_PER_DAY + 3600, "duration_s": 7200}]}},
            {"kind": "gap", "params": {"channels": ["slew_angle", "slew_load"]},
             "schedule": {"ranges": [{"start": max(1, days * 200 // 365) * SECONDS_PER_DAY - 1800,
                                                "duration_s": 5400}]}},
        ],
    }


def commissioning_scenario(seed: int = 17, days: int = 30) -> dict:
    """Smooth pressure signal with a few single-sample glitches per day."""
    return {
        "seed": seed, "machine_id": "brr1", "start": "2024-05-01", "days": days, "dt_seconds": 1,
        "channels": [
            {"channel_id": "hyd_pressure", "generator": "sinusoid", "unit": "bar", "phys_min": 0,
             "phys_max": 400, "params": {"mean": 200, "amplitude": 10, "period_s": 21600, "noise": 1}},
        ],
        "injections": [
            {"kind": "sporadic_spike", "params": {"channel": "hyd_pressure", "offset": 60},
             "schedule": {"per_day": [2, 5], "min_separation_s": 600, "margin_s": 300}},
        ],
    }
