"""Command line interface.

::

    minetrace ingest    --config C --store S PACKET_DIR [--derive]
    minetrace query     --config C --store S CHANNEL... [--from T] [--to T] [--format csv|ndjson]
    minetrace symbolize --config C --store S SOURCE [--from T] [--to T]
    minetrace events    --config C --store S PATTERN [--report DIR] [--plot DIR]
    minetrace histogram --config C --store S ANGLE LOAD [--bin-width DEG] [--plot DIR]
    minetrace faults    --config C --store S CHANNEL [--max-run N] [--k K] [--half-window H]
    minetrace generate  SCENARIO_JSON OUT_DIR

Exit status: 0 success, 1 packet rejected by quality control, 2 input,
format or configuration error.  All output is UTF-8 with LF line ends.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .analytics import (
    DEFAULT_BIN_WIDTH_DEG,
    detect_events,
    event_report,
    events_to_ndjson,
    find_sporadic_faults,
    polar_histogram_stream,
)
from .astsa import SymbolSequence, fuse_states, symbolize
from .config import MachineConfig, load_config
from .core import Stream, TimeRange, day_start, format_iso, parse_iso
from .derived import evaluate
from .errors import ConfigError, MinetraceError, QcRejected
from .ingest import find_packets, merge_packets, quality_check, read_packet
from .store import ChunkStore, export

EXIT_OK, EXIT_QC, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def _out(text: str) -> None:
    sys.stdout.write(text)


# ------------------------------------------------------------------- helpers


def resolve_range(store: ChunkStore, machine_id: str, channel_ids, start: Optional[str],
                  end: Optional[str]) -> Optional[TimeRange]:
    """Requested range clipped to what the store holds; ``None`` when they do not meet."""
    ext = store.extent(machine_id, channel_ids)
    if ext is None:
        return None
    lo = parse_iso(start) if start else ext.start
    hi = parse_iso(end) if end else ext.end
    if lo >= hi:
        return None
    return TimeRange(lo, hi).intersect(ext)


def source_channels(cfg: MachineConfig, source: str) -> list[str]:
    if source in cfg.state_lexicons:
        return [c for cid in cfg.state_lexicons[source].inputs for c in source_channels(cfg, cid)]
    if source in cfg.lexicons:
        lex = cfg.lexicons[source]
        return list(dict.fromkeys([source, *(r.channel_id for r in lex.adjective_rules)]))
    raise ConfigError(f"{source!r} is neither a lexicon channel nor a state lexicon")


def sequence_for(cfg: MachineConfig, store: ChunkStore, source: str, rng: TimeRange) -> SymbolSequence:
    """Symbolize a channel, or fuse the channels of a state lexicon, over ``rng``."""
    if source in cfg.state_lexicons:
        slex = cfg.state_lexicons[source]
        return fuse_states([sequence_for(cfg, store, cid, rng) for cid in slex.inputs], slex)
    ids = source_channels(cfg, source)
    data = store.read_range(cfg.machine_id, ids, rng)
    return symbolize(data[source], cfg.lexicons[source], data)


def _empty_sequence(cfg: MachineConfig, source: str) -> SymbolSequence:
    source_channels(cfg, source)
    return SymbolSequence(source, cfg.nominal_dt_seconds, ())


def _packet_span(p) -> Optional[tuple[int, int]]:
    if not p.n_rows:
        return None
    return int(p.timestamps.min()), int(p.timestamps.max())


def _components(spans: list[tuple[str, int, int]]) -> list[list[str]]:
    """Group packets whose UTC-day spans overlap; groups never share a stored day."""
    groups: list[list[str]] = []
    cur_end = None
    for stem, lo, hi in sorted(spans, key=lambda s: (day_start(s[1]), s[0])):
        if cur_end is None or day_start(lo) > cur_end:
            groups.append([stem])
            cur_end = day_start(hi)
        else:
            groups[-1].append(stem)
            cur_end = max(cur_end, day_start(hi))
    return groups


# ------------------------------------------------------------------ commands


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    store = ChunkStore(args.store)
    found = find_packets(args.packet_dir)
    paths = {stem: (m, d) for stem, m, d in found}
    known = set(cfg.channel_ids)

    # first pass: quality control only, so nothing is written if any packet is rejected
    spans, rejected = [], 0
    for stem, (mp, dp) in paths.items():
        packet = read_packet(mp, dp)
        if packet.machine_id != cfg.machine_id:
            raise ConfigError(f"{stem}: packet is for machine {packet.machine_id!r}, config is {cfg.machine_id!r}")
        unknown = sorted(set(packet.channel_ids) - known)
        if unknown:
            raise ConfigError(f"{stem}: channels not in config: {', '.join(unknown)}")
        report = quality_check(packet)
        _out(report.summary() + "\n")
        if not report.accepted:
            rejected += 1
            continue
        span = _packet_span(report.packet)
        if span is not None:
            spans.append((stem, *span))
    if rejected:
        _out(f"{len(found)} packets, {rejected} rejected, nothing stored\n")
        return EXIT_QC

    conflicts = samples = 0
    for group in _components(spans):
        packets = [read_packet(*paths[stem]) for stem in group]
        stream, found_conflicts = merge_packets(packets, cfg.machine_id, cfg.nominal_dt_seconds)
        for c in found_conflicts:
            sys.stderr.write(f"conflict {c.channel_id}@{format_iso(c.timestamp)}: "
                             f"{c.existing!r} -> {c.incoming!r}\n")
        if args.derive and cfg.derived:
            series = dict(stream.channels)
            for spec in cfg.derived:
                if set(spec.inputs) <= set(series):
                    series[spec.output.channel_id] = evaluate(spec, stream)
            stream = Stream(stream.machine_id, stream.t0, stream.dt_seconds, series)
        store.write_stream(stream)
        conflicts += len(found_conflicts)
        samples += stream.length
    _out(f"{len(found)} packets, {conflicts} conflicts, {samples} samples/channel\n")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = load_config(args.config)
    store = ChunkStore(args.store)
    ids = [c for part in args.channels for c in part.split(",") if c]
    for cid in ids:
        store.channel_info(cfg.machine_id, cid)
    rng = resolve_range(store, cfg.machine_id, ids, args.start, args.end)
    if rng is None:
        t = parse_iso(args.start) if args.start else 0
        stream = store.read_range(cfg.machine_id, ids, TimeRange(t, t + 1))
        stream = Stream(cfg.machine_id, stream.t0, stream.dt_seconds,
                        {cid: s.with_values([]) for cid, s in stream.channels.items()})
    else:
        stream = store.read_range(cfg.machine_id, ids, rng)
    export(stream, args.format, sys.stdout.buffer)
    sys.stdout.buffer.flush()
    return EXIT_OK


def cmd_symbolize(args) -> int:
    cfg = load_config(args.config)
    store = ChunkStore(args.store)
    rng = resolve_range(store, cfg.machine_id, source_channels(cfg, args.source), args.start, args.end)
    seq = _empty_sequence(cfg, args.source) if rng is None else sequence_for(cfg, store, args.source, rng)
    _out(seq.to_ndjson())
    return EXIT_OK


def cmd_events(args) -> int:
    cfg = load_config(args.config)
    store = ChunkStore(args.store)
    source, pattern = cfg.pattern(args.pattern)
    rng = resolve_range(store, cfg.machine_id, source_channels(cfg, source), args.start, args.end)
    seq = _empty_sequence(cfg, source) if rng is None else sequence_for(cfg, store, source, rng)
    window = args.context or cfg.context_window_s
    events = detect_events(seq, pattern, window)
    _out(events_to_ndjson(events))
    if args.report or args.plot:
        channels = list(cfg.report_channels) or [
            c for c in cfg.channel_ids if c in store.channels(cfg.machine_id)
        ]
        report = event_report(events, store, cfg.machine_id, channels)
        if args.report:
            report.write_dir(args.report)
        if args.plot:
            from . import plots

            plots.event_timeline(events, rng, Path(args.plot) / "event_timeline.png")
            for e, section in zip(report.events, report.sections):
                plots.event_traces(e, section, Path(args.plot) / f"event_{e.event_id:04d}.png")
    return EXIT_OK


def cmd_histogram(args) -> int:
    cfg = load_config(args.config)
    store = ChunkStore(args.store)
    ids = [args.angle, args.load]
    for cid in ids:
        store.channel_info(cfg.machine_id, cid)
    rng = resolve_range(store, cfg.machine_id, ids, args.start, args.end)
    days = () if rng is None else store.iter_days(cfg.machine_id, ids, rng)
    hist = polar_histogram_stream(((d[args.angle], d[args.load]) for d in days), args.bin_width)
    _out(hist.to_csv())
    if args.plot:
        from . import plots

        plots.polar(hist, Path(args.plot) / f"polar_{args.load}.png", title=f"{args.load} over {args.angle}")
    return EXIT_OK


def cmd_faults(args) -> int:
    cfg = load_config(args.config)
    store = ChunkStore(args.store)
    store.channel_info(cfg.machine_id, args.channel)
    rng = resolve_range(store, cfg.machine_id, [args.channel], args.start, args.end)
    if rng is None:
        return EXIT_OK
    series = store.read_series(cfg.machine_id, args.channel, rng)
    report = find_sporadic_faults(series, args.max_run, args.k, args.half_window)
    _out(report.to_ndjson())
    return EXIT_OK


def cmd_generate(args) -> int:
    from .testgen import ScenarioSpec, generate

    manifest = generate(ScenarioSpec.load(args.scenario), args.out_dir)
    _out(f"{len(manifest.packets)} packets, {len(manifest.events)} events, "
         f"{len(manifest.spikes)} spikes, {len(manifest.gaps)} gaps\n")
    return EXIT_OK


# ------------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="minetrace", description="Telemetry ingestion, symbolic analysis and reports.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help, ranged=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="machine configuration JSON")
        p.add_argument("--store", required=True, help="chunk store root directory")
        if ranged:
            p.add_argument("--from", dest="start", help="range start, ISO-8601 UTC")
            p.add_argument("--to", dest="end", help="range end (exclusive), ISO-8601 UTC")
        p.set_defaults(fn=fn)
        return p

    p = command("ingest", cmd_ingest, "quality-check, merge and store a packet directory", ranged=False)
    p.add_argument("packet_dir")
    p.add_argument("--derive", action="store_true", help="also store configured derived channels")

    p = command("query", cmd_query, "export stored channels")
    p.add_argument("channels", nargs="+", help="channel ids (space or comma separated)")
    p.add_argument("--format", choices=("csv", "ndjson"), default="csv")

    p = command("symbolize", cmd_symbolize, "print the symbol sequence of a channel or state lexicon")
    p.add_argument("source")

    p = command("events", cmd_events, "detect pattern occurrences with context windows")
    p.add_argument("pattern", help="pattern name from the config")
    p.add_argument("--context", type=int, help="context window in seconds (default from config)")
    p.add_argument("--report", help="directory for timeline.csv and one CSV per event")
    p.add_argument("--plot", help="directory for PNG plots")

    p = command("histogram", cmd_histogram, "polar histogram of a load over an angle channel")
    p.add_argument("angle")
    p.add_argument("load")
    p.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH_DEG)
    p.add_argument("--plot", help="directory for PNG plots")

    p = command("faults", cmd_faults, "scan a channel for isolated sensor glitches")
    p.add_argument("channel")
    p.add_argument("--max-run", type=int, default=5)
    p.add_argument("--k", type=float, default=8.0)
    p.add_argument("--half-window", type=int, default=30)

    p = sub.add_parser("generate", help="write a synthetic scenario (packets + manifest.json)")
    p.add_argument("scenario")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the final flush
        try:
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        except (OSError, ValueError, AttributeError):
            pass
        return EXIT_OK
    except QcRejected as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_QC
    except (MinetraceError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
