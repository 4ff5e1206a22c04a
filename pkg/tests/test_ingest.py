import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DAY, T0, meta, nan_equal, stream
from oracles import naive_qc
from minetrace.core import format_iso
from minetrace.errors import FormatError, IntervalError, QcRejected, SchemaError
from minetrace.ingest import (
    DataPacket,
    QcRule,
    find_packets,
    merge_packets,
    packet_documents,
    packet_from_stream,
    parse_packet,
    quality_check,
    read_packet,
    write_packet,
)


def sidecar(channels, packet_id="p1", machine="m1", created="2024-01-02T01:00:00Z") -> bytes:
    return json.dumps({
        "packet_id": packet_id, "machine_id": machine, "created_at": created,
        "channels": [m.to_dict() for m in channels],
    }).encode()


def csv_doc(header, rows) -> bytes:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    return ("\n".join(lines) + "\n").encode()


def day_packet(day, columns, packet_id=None, created=None, machine="m1", metas=None):
    t0 = T0 + day * DAY
    n = len(next(iter(columns.values())))
    metas = metas or [meta(cid) for cid in columns]
    return DataPacket(
        packet_id or f"d{day}", machine, created if created is not None else t0 + DAY + 3600,
        metas, t0 + np.arange(n), {cid: np.asarray(v, dtype=float) for cid, v in columns.items()},
    )


# ------------------------------------------------------------------ parsing


def test_parse_fifty_channel_daily_export():
    metas = [meta(f"s{i:02d}", lo=-10, hi=10, machine_id="m1") for i in range(50)]
    pkt = DataPacket("p", "m1", T0 + DAY, metas, T0 + np.arange(DAY),
                     {m.channel_id: np.full(DAY, 1.25) for m in metas})
    meta_doc, data_doc = packet_documents(pkt)
    back = parse_packet(meta_doc, data_doc)
    assert len(back.channels) == 50 and back.n_rows == 86_400
    assert back.channels == pkt.channels
    assert np.array_equal(back.timestamps, pkt.timestamps)


def test_parse_zero_row_packet():
    p = parse_packet(sidecar([meta("a")]), b"timestamp,a\n")
    assert p.n_rows == 0 and p.channel_ids == ["a"]


def test_parse_undeclared_column():
    with pytest.raises(SchemaError):
        parse_packet(sidecar([meta("a")]), csv_doc(["timestamp", "a", "b"], [["2024-01-01T00:00:00Z", "1", "2"]]))


def test_parse_missing_fields_and_malformed():
    doc = json.loads(sidecar([meta("a")]))
    del doc["created_at"]
    with pytest.raises(SchemaError):
        parse_packet(json.dumps(doc).encode(), b"timestamp,a\n")
    doc = json.loads(sidecar([meta("a")]))
    del doc["channels"][0]["hypothesis"]
    with pytest.raises(SchemaError):
        parse_packet(json.dumps(doc).encode(), b"timestamp,a\n")
    with pytest.raises(FormatError):
        parse_packet(b"{not json", b"timestamp,a\n")
    with pytest.raises(FormatError):
        parse_packet(sidecar([meta("a")]), b"time,a\n")
    with pytest.raises(FormatError):
        parse_packet(sidecar([meta("a")]), csv_doc(["timestamp", "a"], [["2024-01-01 00:00:00", "1"]]))
    with pytest.raises(FormatError):
        parse_packet(sidecar([meta("a")]), csv_doc(["timestamp", "a"], [["2024-01-01T00:00:00Z", "one"]]))


def test_parse_preserves_row_order_and_missing():
    rows = [["2024-01-01T00:00:02Z", "3"], ["2024-01-01T00:00:00Z", ""], ["2024-01-01T00:00:01Z", "-1.5"]]
    p = parse_packet(sidecar([meta("a")]), csv_doc(["timestamp", "a"], rows))
    assert (p.timestamps - T0).tolist() == [2, 0, 1]
    assert p.columns["a"].mask.tolist() == [False, True, False]
    assert p.columns["a"].data[2] == -1.5


def test_packet_documents_round_trip(tmp_path):
    p = day_packet(0, {"a": [1.0, np.nan, 3.5], "b": [0.1, 0.2, 1e-7]})
    write_packet(p, tmp_path, "x")
    [(stem, mp, dp)] = find_packets(tmp_path)
    q = read_packet(mp, dp)
    assert stem == "x" and q.packet_id == p.packet_id and q.created_at == p.created_at
    for cid in ("a", "b"):
        assert nan_equal(q.column_values(cid), p.column_values(cid))
    text = dp.read_text()
    assert "\r" not in text and text.splitlines()[2] == "2024-01-01T00:00:01Z,,0.2"


def test_find_packets_unpaired(tmp_path):
    (tmp_path / "a.meta.json").write_text("{}")
    with pytest.raises(FormatError):
        find_packets(tmp_path)


# ----------------------------------------------------------------------- QC


def test_qc_clean_packet():
    r = quality_check(day_packet(0, {"a": [1.0, 2.0, 3.0]}))
    assert r.accepted and r.violations == ()


def test_qc_duplicate_timestamp_keeps_first():
    p = DataPacket("p", "m1", T0, [meta("a")], [T0, T0 + 1, T0 + 1, T0 + 2],
                   {"a": [1.0, 2.0, 9.0, 3.0]})
    r = quality_check(p)
    assert r.accepted
    assert [v.rule for v in r.violations] == [QcRule.DuplicateTimestamp]
    assert r.packet.column_values("a").tolist() == [1.0, 2.0, 3.0]


def test_qc_out_of_range_sample_is_masked():
    temp = meta("temp_c", lo=-40, hi=120)
    p = DataPacket("p", "m1", T0, [temp], T0 + np.arange(4), {"temp_c": [20.0, 150.0, 21.0, math.inf]})
    r = quality_check(p)
    assert r.accepted
    assert sorted(v.rule.value for v in r.violations) == ["NonFiniteValue", "OutOfPhysicalRange"]
    assert nan_equal(r.packet.column_values("temp_c"), [20.0, np.nan, 21.0, np.nan])


def test_qc_fatal_rules():
    p = DataPacket("p", "m1", T0, [meta("a")], [T0 + 1, T0], {"a": [1.0, 2.0]})
    r = quality_check(p)
    assert not r.accepted and r.packet is None and "REJECTED" in r.summary()
    p = DataPacket("p", "m1", T0, [meta("a")], [T0], {"a": [1.0], "zz": [1.0]})
    assert [v.rule for v in quality_check(p).violations] == [QcRule.UndeclaredChannel]


rows_strategy = st.lists(
    st.tuples(
        st.integers(0, 12),
        st.fixed_dictionaries({}, optional={
            "a": st.one_of(st.none(), st.floats(-20, 20), st.sampled_from([math.nan, math.inf])),
            "b": st.one_of(st.none(), st.floats(-20, 20)),
            "q": st.floats(0, 1),
        }),
    ),
    max_size=25,
)


@given(rows_strategy, st.booleans())
def test_qc_matches_naive_scan(raw, sort_rows):
    if sort_rows:
        raw = sorted(raw, key=lambda r: r[0])
    rows = [(T0 + t, v) for t, v in raw]
    bounds = {"a": (-10.0, 10.0), "b": (-5.0, 15.0)}
    metas = [meta(c, lo=lo, hi=hi) for c, (lo, hi) in bounds.items()]
    p = DataPacket.from_rows("p", "m1", T0, metas, rows)
    r = quality_check(p)
    got = sorted((v.rule.value, v.channel_id, v.timestamp) for v in r.violations)
    assert got == sorted(naive_qc(rows, bounds, created_at=T0))
    assert r.accepted == (not any(g[0] in ("NonMonotonicTime", "UndeclaredChannel") for g in got))


# -------------------------------------------------------------------- merge


def test_merge_three_days():
    packets = [day_packet(d, {"a": np.full(DAY, float(d)), "b": np.arange(DAY, dtype=float)}) for d in range(3)]
    s, conflicts = merge_packets(packets, "m1")
    assert s.length == 259_200 and conflicts == []
    assert not np.isnan(s["a"].values).any()
    assert s["a"].values[DAY - 1] == 0.0 and s["a"].values[DAY] == 1.0


def test_merge_empty_list():
    s, conflicts = merge_packets([], "m1")
    assert s.length == 0 and conflicts == []


def test_merge_overlap_with_one_divergent_sample():
    a = np.arange(DAY, dtype=float)
    first = day_packet(0, {"a": a}, "first", created=T0 + DAY)
    tail = a[-3600:].copy()
    tail[1234] += 0.5
    second = DataPacket("second", "m1", T0 + DAY + 10, [meta("a")], T0 + DAY - 3600 + np.arange(3600),
                        {"a": tail})
    s, conflicts = merge_packets([second, first], "m1")
    # brute-force comparison of the overlapping hour
    diffs = [(int(t), x, y) for t, x, y in zip(second.timestamps, a[-3600:], tail) if x != y]
    assert [(c.timestamp, c.existing, c.incoming) for c in conflicts] == diffs
    assert len(conflicts) == 1
    assert s["a"].values[DAY - 3600 + 1234] == tail[1234]


def test_merge_gap_between_packets_is_missing():
    s, _ = merge_packets([day_packet(0, {"a": np.ones(10)}), day_packet(2, {"a": np.ones(10)})], "m1")
    assert s.length == 2 * DAY + 10
    assert np.isnan(s["a"].values[10 : 2 * DAY]).all()


def test_merge_rejects_bad_packets_and_grids():
    bad = DataPacket("p", "m1", T0, [meta("a")], [T0 + 1, T0], {"a": [1.0, 2.0]})
    with pytest.raises(QcRejected):
        merge_packets([bad], "m1")
    odd = DataPacket("p", "m1", T0, [meta("a")], [T0 + 1, T0 + 3], {"a": [1.0, 2.0]})
    with pytest.raises(IntervalError):
        merge_packets([odd], "m1", nominal_dt=2)
    with pytest.raises(SchemaError):
        merge_packets([day_packet(0, {"a": [1.0]}, machine="other")], "m1")


def test_merge_coarse_grid():
    p = DataPacket("p", "m1", T0, [meta("a")], [T0, T0 + 20, T0 + 30], {"a": [1.0, 2.0, 3.0]})
    s, _ = merge_packets([p], "m1", nominal_dt=10)
    assert s.dt_seconds == 10 and nan_equal(s["a"].values, [1.0, np.nan, 2.0, 3.0])


packet_sets = st.lists(
    st.tuples(st.integers(0, 40), st.integers(1, 30), st.integers(0, 5),
              st.lists(st.one_of(st.none(), st.integers(-3, 3)), min_size=30, max_size=30)),
    min_size=1, max_size=5,
)


def _packets(spec):
    out = []
    for i, (start, n, created, vals) in enumerate(spec):
        rows = [(T0 + start + k, {"a": None if vals[k] is None else float(vals[k])}) for k in range(n)]
        out.append(DataPacket.from_rows(f"p{i}", "m1", T0 + created, [meta("a")], rows))
    return out


@given(packet_sets, st.randoms(use_true_random=False))
def test_merge_order_insensitive(spec, rnd):
    packets = _packets(spec)
    s1, c1 = merge_packets(packets, "m1")
    shuffled = packets[:]
    rnd.shuffle(shuffled)
    s2, c2 = merge_packets(shuffled, "m1")
    assert s1 == s2 and c1 == c2


@given(packet_sets)
def test_merge_idempotent_and_present_count_law(spec):
    packets = _packets(spec)
    s, conflicts = merge_packets(packets, "m1")
    again, more = merge_packets([packet_from_stream(s, "re", T0 + 100)], "m1")
    assert again == s and more == []
    present = int((~np.isnan(s["a"].values)).sum())
    total_rows = sum(int((~p.columns["a"].mask).sum()) for p in packets)
    assert present <= total_rows
    spans = [set(p.timestamps.tolist()) for p in packets]
    disjoint = sum(len(x) for x in spans) == len(set().union(*spans))
    if disjoint:
        assert present == total_rows


@given(packet_sets)
def test_merge_latest_created_wins_brute_force(spec):
    packets = _packets(spec)
    s, _ = merge_packets(packets, "m1")
    expected = {}
    for p in sorted(packets, key=lambda q: (q.created_at, q.packet_id)):
        for t, vals in p.rows():
            if vals["a"] is not None:
                expected[t] = vals["a"]
    got = {int(t): v for t, v in zip(s.times(), s["a"].values) if not np.isnan(v)}
    assert got == expected
