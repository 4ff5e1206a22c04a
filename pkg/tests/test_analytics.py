import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DAY, T0, meta, series, stream
from oracles import naive_local_outliers, naive_polar_counts
from minetrace.analytics import (
    PolarHistogram,
    daily_vs_aggregate,
    daily_vs_aggregate_stream,
    detect_events,
    event_report,
    events_to_ndjson,
    find_sporadic_faults,
    local_median_mad,
    polar_histogram,
    polar_histogram_stream,
    recognize_operations,
)
from minetrace.astsa import Lexicon, StateLexicon, SymbolSequence, SymbolToken, fuse_states, symbolize
from minetrace.core import Series, TimeRange
from minetrace.errors import BinWidthError, InsufficientData
from minetrace.store import ChunkStore
from minetrace.symquery import find_matches, parse_pattern

INF = np.inf


def level_seq(levels, dt=1, t0=T0):
    """Noun sequence for a piecewise-constant signal given as (value, seconds) pairs."""
    v = np.concatenate([np.full(n // dt, x, dtype=float) for x, n in levels])
    lex = Lexicon("x", [(100, "idle"), (250, "working"), (INF, "overload")])
    return symbolize(series(v, t0=t0, dt=dt), lex), v


# ---------------------------------------------------------------- incidents

INCIDENT = parse_pattern("noun:working verb:goto_overload noun:overload[dur<60] verb:goto_idle")


def test_event_window_ends_after_last_matched_sample():
    seq, _ = level_seq([(180, 600), (320, 10), (50, 100)])
    (e,) = detect_events(seq, INCIDENT, 300)
    # the match ends with the verb at the first idle sample
    assert e.t_event == T0 + 610
    assert e.window == TimeRange(T0 + 611 - 300, T0 + 611)
    assert e.window.duration == 300 and not e.clipped
    assert e.event_id == 1


def test_event_window_clipped_at_sequence_start():
    seq, _ = level_seq([(180, 20), (320, 10), (50, 30)])
    (e,) = detect_events(seq, INCIDENT, 300)
    assert e.clipped and e.window.start == T0 and e.window.end == e.t_event + 1


def test_absent_pattern_and_long_overload_give_no_events():
    seq, _ = level_seq([(180, 600), (320, 61), (50, 100)])
    assert detect_events(seq, INCIDENT, 300) == []
    with pytest.raises(ValueError):
        detect_events(seq, INCIDENT, 0)


def test_event_count_equals_match_count(rng):
    levels = []
    for _ in range(40):
        levels.append((float(rng.choice([50, 180, 320])), int(rng.integers(5, 120))))
    seq, _ = level_seq(levels)
    assert len(detect_events(seq, INCIDENT, 300)) == len(find_matches(INCIDENT, seq))


def test_event_report_sections(tmp_path):
    levels = [(180, 400), (320, 10), (50, 200)] * 3
    seq, v = level_seq(levels)
    other = np.arange(v.size, dtype=float)
    s = stream({"x": v, "y": other})
    store = ChunkStore(tmp_path / "store")
    store.write_stream(s)
    events = detect_events(seq, INCIDENT, 300)
    assert len(events) == 3
    report = event_report(events, store, "m1", ["x", "y"])
    assert [sec.length for sec in report.sections] == [300, 300, 300]
    assert all(list(sec.channels) == ["x", "y"] for sec in report.sections)
    for e, sec in zip(events, report.sections):
        lo = (e.window.start - T0)
        assert np.array_equal(sec["y"].values, other[lo : lo + 300])
    files = report.write_dir(tmp_path / "rep")
    assert [f.name for f in files] == ["timeline.csv", "event_0001.csv", "event_0002.csv", "event_0003.csv"]
    rows = list(csv.reader(io.StringIO(files[1].read_text())))
    assert rows[0] == ["timestamp", "x", "y"] and len(rows) == 301
    timeline = list(csv.DictReader(io.StringIO(report.timeline_csv())))
    assert [r["event_id"] for r in timeline] == ["1", "2", "3"]
    assert "# event 2" in report.to_text()
    recs = [json.loads(l) for l in events_to_ndjson(events).splitlines()]
    assert recs[0]["pattern"] == INCIDENT.text and recs[0]["window_end"] == timeline[0]["window_end"]


def test_event_report_zero_events(tmp_path):
    report = event_report([], ChunkStore(tmp_path), "m1", ["x"])
    assert report.timeline_csv() == "event_id,t_event,window_start,window_end,clipped\n"


def test_clipped_window_gives_shorter_section(tmp_path):
    seq, v = level_seq([(180, 20), (320, 10), (50, 30)])
    store = ChunkStore(tmp_path)
    store.write_stream(stream({"x": v}))
    (e,) = detect_events(seq, INCIDENT, 300)
    (sec,) = event_report([e], store, "m1", ["x"]).sections
    assert sec.length == e.t_event + 1 - T0 == 31


# ------------------------------------------------------------- operations


def state_token_seq(labels_durations, t0=T0):
    toks, t = [], t0
    for label, d in labels_durations:
        toks.append(SymbolToken("state", label, t, d))
        t += d
    return SymbolSequence("mode", 1, toks)


def test_single_mode_spanning_extent_and_no_patterns():
    seq = state_token_seq([("dig", 100), ("slew", 50)])
    out = recognize_operations(seq, {"cycle": parse_pattern("state:dig state:slew")})
    assert [(n, m.t_start, m.t_end) for n, m in out] == [("cycle", T0, T0 + 150)]
    assert recognize_operations(seq, {}) == []


def test_recognize_rejects_non_state_tokens():
    seq = SymbolSequence("x", 1, [SymbolToken("noun", "a", T0, 1)])
    with pytest.raises(ValueError):
        recognize_operations(seq, {"m": parse_pattern("state:a")})


def test_twenty_scheduled_episodes_recovered(rng):
    # schedule: loading episodes (slew then convey) and travel episodes, separated by stops
    slew = []
    conv = []
    truth = []
    t = 0
    for _ in range(20):
        stop = int(rng.integers(30, 300))
        slew.append(np.zeros(stop))
        conv.append(np.zeros(stop))
        t += stop
        if rng.random() < 0.5:
            a, b = int(rng.integers(20, 200)), int(rng.integers(20, 600))
            slew += [np.ones(a), np.zeros(b)]
            conv += [np.ones(a), np.ones(b)]
            truth.append(("loading", T0 + t, T0 + t + a + b))
            t += a + b
        else:
            a = int(rng.integers(20, 900))
            slew.append(np.ones(a))
            conv.append(np.zeros(a))
            truth.append(("repositioning", T0 + t, T0 + t + a))
            t += a
    slew.append(np.zeros(60))
    conv.append(np.zeros(60))
    seqs = [
        symbolize(series(np.concatenate(slew), "slew"), Lexicon("slew", [(0.5, "still"), (INF, "slewing")])),
        symbolize(series(np.concatenate(conv), "conv"), Lexicon("conv", [(0.5, "off"), (INF, "on")])),
    ]
    slex = StateLexicon("mode", ["slew", "conv"], {
        ("slewing", "on"): "slew_convey",
        ("still", "on"): "convey",
        ("slewing", "off"): "slew_only",
        ("still", "off"): "stopped",
    })
    states = fuse_states(seqs, slex)
    modes = {
        "loading": parse_pattern("state:slew_convey state:convey"),
        "repositioning": parse_pattern("state:slew_only"),
    }
    got = [(name, m.t_start, m.t_end) for name, m in recognize_operations(states, modes)]
    assert got == truth and len(got) == 20


# ---------------------------------------------------------------- faults


def smooth_day(rng, n=DAY):
    t = np.arange(n)
    return 200 + 10 * np.sin(2 * np.pi * t / 21600) + rng.uniform(-1, 1, n)


def test_clean_signal_has_no_faults(rng):
    s = series(smooth_day(rng), lo=0, hi=400)
    assert len(find_sporadic_faults(s)) == 0


def test_three_isolated_spikes_found_exactly(rng):
    v = smooth_day(rng)
    at = [5000, 40000, 80001]
    v[at[0]] += 60
    v[at[1]] -= 60
    v[at[2]] = 450.0  # above the physical range
    rep = find_sporadic_faults(series(v, "hyd", lo=0, hi=400))
    assert rep.fault_timestamps == tuple(T0 + a for a in at)
    assert rep.rules == ("LocalOutlier", "LocalOutlier", "OutOfRangeIsolated")
    lines = [json.loads(l) for l in rep.to_ndjson().splitlines()]
    assert lines[2] == {"channel": "hyd", "t": "2024-01-01T22:13:21Z", "rule": "OutOfRangeIsolated"}


def test_level_shift_is_signal_not_fault(rng):
    v = smooth_day(rng)
    v[30000:37200] += 80
    assert len(find_sporadic_faults(series(v, lo=0, hi=400), max_run=5)) == 0


def test_short_run_flagged_long_run_not(rng):
    v = smooth_day(rng, 5000)
    v[1000:1005] += 100  # 5 samples: glitch
    v[3000:3006] += 100  # 6 samples: excursion
    rep = find_sporadic_faults(series(v, lo=0, hi=1000), max_run=5)
    assert rep.fault_timestamps == tuple(T0 + i for i in range(1000, 1005))


def test_insufficient_data():
    with pytest.raises(InsufficientData):
        find_sporadic_faults(series(np.ones(60)), half_window=30)
    with pytest.raises(InsufficientData):
        find_sporadic_faults(series(np.r_[np.ones(30), np.full(100, np.nan), np.ones(30)]), half_window=30)


def test_gaps_are_skipped_by_the_window(rng):
    v = smooth_day(rng, 3000)
    v[500:700] = np.nan
    v[701] += 50
    rep = find_sporadic_faults(series(v, lo=0, hi=400))
    assert rep.fault_timestamps == (T0 + 701,)


def test_local_median_mad_against_naive(rng):
    x = rng.normal(size=500)
    x[::37] += 20
    med, mad = local_median_mad(x, 7, block=64)
    want = naive_local_outliers(list(x), 3.0, 7)
    got = np.flatnonzero(np.abs(x - med) > 3.0 * (mad + 1e-12)).tolist()
    assert got == want


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(-1000, 1000))
def test_faults_match_naive_and_are_location_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(25, 400))
    v = np.round(rng.normal(size=n) * 6) / 2  # half-units keep shifts exact
    v[rng.random(n) < 0.1] = np.nan
    spikes = rng.integers(0, n, size=3)
    v[spikes] += 40
    if np.count_nonzero(~np.isnan(v)) < 11:
        return
    k, h, max_run = 4.0, 5, 3
    rep = find_sporadic_faults(series(v, lo=-1e6, hi=1e6), max_run=max_run, k=k, half_window=h)
    flagged = np.zeros(n, dtype=bool)
    flagged[naive_local_outliers(list(v), k, h)] = True
    # keep only runs of at most max_run consecutive flagged grid samples
    keep = []
    i = 0
    while i < n:
        if flagged[i]:
            j = i
            while j < n and flagged[j]:
                j += 1
            if j - i <= max_run:
                keep.extend(range(i, j))
            i = j
        else:
            i += 1
    assert rep.fault_timestamps == tuple(T0 + i for i in keep)
    moved = find_sporadic_faults(series(v + shift, lo=-1e6 + shift, hi=1e6 + shift), max_run=max_run, k=k, half_window=h)
    assert moved.fault_timestamps == rep.fault_timestamps


# ------------------------------------------------------------------ polar


def test_all_at_zero_degrees_single_bin():
    h = polar_histogram(series(np.zeros(1000), "ang"), series(np.full(1000, 2.0), "load"))
    assert h.counts[0] == 1000 and h.counts[1:].sum() == 0
    assert h.bins[0].mean == 2.0 and np.isnan(h.bins[1].mean)
    assert len(h.bins) == 72


def test_uniform_angles_match_brute_force_tally(rng):
    a = rng.uniform(-720, 720, 10_000)
    l = rng.integers(0, 100, 10_000).astype(float)
    a[::97] = np.nan
    l[::89] = np.nan
    h = polar_histogram(series(a, "ang"), series(l, "load"), 7.5)
    counts, sums = naive_polar_counts(a.tolist(), l.tolist(), 7.5)
    assert h.counts.tolist() == [counts.get(i, 0) for i in range(48)]
    assert h.sums.tolist() == [sums.get(i, 0.0) for i in range(48)]
    present = ~np.isnan(a) & ~np.isnan(l)
    assert h.total_samples == present.sum() and h.sums.sum() == l[present].sum()


def test_bin_edges_and_wraparound():
    h = PolarHistogram(5)
    assert h.bin_index(np.array([0.0, 4.999, 5.0, 359.999, 360.0, -0.001, -5.0])).tolist() == [0, 0, 1, 71, 0, 71, 71]


@pytest.mark.parametrize("w", [0, -5, 7, 361])
def test_bad_bin_width(w):
    with pytest.raises(BinWidthError):
        PolarHistogram(w)


def test_histogram_aligns_offset_series():
    a = series(np.full(100, 10.0), "ang", t0=T0)
    l = series(np.ones(100), "load", t0=T0 + 60)
    assert polar_histogram(a, l).total_samples == 40


def test_streaming_equals_single_pass_and_csv(rng):
    a = rng.uniform(0, 360, 3 * 5000)
    l = rng.uniform(0, 10, 3 * 5000)
    whole = polar_histogram(series(a, "ang"), series(l, "load"))
    pieces = [(series(a[i : i + 5000], "ang", t0=T0 + i), series(l[i : i + 5000], "load", t0=T0 + i))
              for i in range(0, 15000, 5000)]
    parts = polar_histogram_stream(pieces)
    assert parts.counts.tolist() == whole.counts.tolist()
    assert np.allclose(parts.sums, whole.sums, rtol=1e-12)
    rows = list(csv.reader(io.StringIO(whole.to_csv())))
    assert rows[0] == ["bin_start_deg", "count", "sum", "mean"]
    assert len(rows) == 74 and rows[-1][0] == "total" and int(rows[-1][1]) == 15000


@settings(max_examples=30)
@given(st.permutations(list(range(30))), st.integers(0, 1000))
def test_polar_permutation_invariant(perm, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 360, 30)
    l = rng.integers(0, 9, 30).astype(float)
    p = np.array(perm)
    h1 = polar_histogram(series(a, "ang"), series(l, "load"), 30)
    h2 = polar_histogram(series(a[p], "ang"), series(l[p], "load"), 30)
    assert h1.counts.tolist() == h2.counts.tolist() and h1.sums.tolist() == h2.sums.tolist()


def test_merge_is_commutative_monoid(rng):
    hs = []
    for _ in range(3):
        h = PolarHistogram(10)
        h.update(rng.uniform(0, 360, 100), rng.integers(0, 5, 100).astype(float))
        hs.append(h)
    empty = PolarHistogram(10)
    x, y, z = hs
    assert ((x + y) + z).counts.tolist() == (x + (y + z)).counts.tolist()
    assert (x + y).sums.tolist() == (y + x).sums.tolist()
    assert (x + empty).counts.tolist() == x.counts.tolist()
    with pytest.raises(BinWidthError):
        x + PolarHistogram(5)


# ------------------------------------------------------ daily vs aggregate


def test_symmetric_load_gives_quarter_share():
    n = 4 * DAY
    angles = (np.arange(n) * 0.25) % 360.0
    loads = np.full(n, 3.0)
    for q in range(4):
        r = daily_vs_aggregate(series(angles, "ang"), series(loads, "load"), quadrant=q)
        assert abs(r.annual_quadrant_share - 0.25) < 1e-12
        assert len(r.days) == 4 and all(m == 3.0 for m in r.daily_means)


def test_unvisited_quadrant_share_zero():
    r = daily_vs_aggregate(series(np.full(100, 45.0), "ang"), series(np.ones(100), "load"), quadrant=2)
    assert r.annual_quadrant_share == 0.0 and np.isnan(r.daily_means[0])


def test_daily_means_per_utc_day():
    angles = np.r_[np.full(DAY, 100.0), np.full(DAY, 100.0)]
    loads = np.r_[np.full(DAY, 2.0), np.full(DAY, 6.0)]
    pieces = [(series(angles[:DAY], "ang"), series(loads[:DAY], "load")),
              (series(angles[DAY:], "ang", t0=T0 + DAY), series(loads[DAY:], "load", t0=T0 + DAY))]
    r = daily_vs_aggregate_stream(pieces, quadrant=1)
    assert r.days == (T0, T0 + DAY) and r.daily_means == (2.0, 6.0) and r.annual_quadrant_share == 1.0


def test_quadrant_requires_splitting_width():
    with pytest.raises(BinWidthError):
        daily_vs_aggregate(series([1.0], "ang"), series([1.0], "load"), bin_width_deg=120)
    with pytest.raises(ValueError):
        daily_vs_aggregate(series([1.0], "ang"), series([1.0], "load"), quadrant=4)
