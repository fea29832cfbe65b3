import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowvision.flowtable import FlowKey, FlowRecord
from flowvision.graph import (
    AggKind, GraphFormatError, GraphVersionError, Histogram, InteractionGraph, VertexKind, add_edges,
    aggregate_short, build_graph, diff, export_graph, fit_long, import_graph, interval_codes, length_codes,
)
from flowvision.ingest import ACK, L4, SYN


def flow(src="10.0.0.1", dst="10.0.0.2", sport=1000, dport=80, n=3, t0=0.0, mask=1 | SYN << 8,
         lengths=None, intervals=None, proto=L4.TCP):
    lengths = np.full(n, 60, np.int64) if lengths is None else np.asarray(lengths, np.int64)
    intervals = np.r_[0.0, np.full(n - 1, 0.01)] if intervals is None else np.asarray(intervals, float)
    n = len(lengths)
    return FlowRecord(FlowKey(src, dst, sport, dport), np.full(n, mask, np.uint16), lengths, intervals,
                      t0, t0 + float(intervals.sum()), proto)


# --------------------------------------------------------------------------- aggregation


def test_same_src_same_dst_is_both_agg():
    (e,) = aggregate_short([flow(sport=1000 + i, t0=i) for i in range(25)], agg_line=20)
    assert e.agg_kind is AggKind.BOTH_AGG and e.flow_count == 25
    assert (e.first_ts, e.last_ts) == (0.0, 24.02)


def test_same_src_many_dst_is_src_agg_with_group_vertex():
    edges = aggregate_short([flow(dst=f"10.1.0.{i}") for i in range(25)], agg_line=20)
    (e,) = edges
    assert e.agg_kind is AggKind.SRC_AGG
    g = InteractionGraph()
    g.add_edges(edges)
    dst = g.vertices[e.dst]
    assert dst.kind is VertexKind.GROUP and len(dst.addrs) == 25
    assert g.vertices[e.src].kind is VertexKind.SINGLE


def test_many_src_same_dst_is_dst_agg():
    (e,) = aggregate_short([flow(src=f"10.2.0.{i}") for i in range(30)], agg_line=20)
    assert e.agg_kind is AggKind.DST_AGG and e.flow_count == 30


def test_unrelated_flows_stay_separate():
    fs = [flow(src=f"10.0.0.{i}", dst=f"10.9.0.{i}") for i in range(3)]
    edges = aggregate_short(fs, agg_line=20)
    assert [e.agg_kind for e in edges] == [AggKind.NO_AGG] * 3


def test_threshold_is_strict():
    assert [e.agg_kind for e in aggregate_short([flow(sport=i) for i in range(20)], 20)] == [AggKind.NO_AGG] * 20
    assert [e.agg_kind for e in aggregate_short([flow(sport=i) for i in range(21)], 20)] == [AggKind.BOTH_AGG]


def test_protocol_mask_splits_groups():
    fs = [flow(sport=i) for i in range(21)] + [flow(sport=100 + i, mask=1 | ACK << 8) for i in range(21)]
    edges = aggregate_short(fs, 20)
    assert sorted(e.protocol_mask for e in edges) == [1 | SYN << 8, 1 | ACK << 8]


def test_source_aggregation_consumes_first():
    # Flow set qualifying both ways: 21 from A to B plus 21 from others to B.
    fs = [flow(sport=i) for i in range(21)] + [flow(src=f"10.3.0.{i}") for i in range(21)]
    kinds = Counter(e.agg_kind for e in aggregate_short(fs, 20))
    assert kinds == {AggKind.BOTH_AGG: 1, AggKind.DST_AGG: 1}


def test_representative_is_first_member():
    fs = [flow(sport=i, lengths=[40 + i] * 3) for i in range(22)]
    (e,) = aggregate_short(fs, 20)
    assert e.lengths.tolist() == [40, 40, 40]
    assert e.member_tuples == [f.key for f in fs]


def test_agg_line_must_be_positive():
    with pytest.raises(ValueError):
        aggregate_short([], 0)


# --------------------------------------------------------------------------- long flows


def test_fit_long_length_buckets():
    e = fit_long(flow(lengths=[100, 105, 109, 1500]))
    assert e.len_hist.bins == {10: 3, 150: 1}


def test_fit_long_zero_intervals():
    e = fit_long(flow(n=4, intervals=[0, 0, 0, 0]))
    assert e.interval_hist.bins == {0: 4} and e.fct == 0.0


def test_fit_long_sixteen_packets_conserved():
    e = fit_long(flow(n=16, lengths=np.arange(16) * 97 + 40))
    assert e.pkt_count == 16
    assert e.len_hist.total == e.interval_hist.total == e.proto_hist.total == 16
    assert e.proto_hist.bins == {1 | SYN << 8: 16}


def test_interval_codes_exact_milliseconds():
    assert interval_codes(np.array([0.003, 0.0009, 1.0, 1e12])).tolist() == [3, 0, 1000, 2 ** 31 - 1]
    assert length_codes(np.array([9, 10, 1514])).tolist() == [0, 1, 151]


def test_histogram_max_bin_tie_goes_low():
    assert Histogram(10, {5: 2, 3: 2, 9: 1}).max_bin() == (2, 3)
    assert Histogram(10).max_bin() == (0, 0)


# --------------------------------------------------------------------------- graph


def test_single_edge_graph():
    g = InteractionGraph()
    add_edges(g, aggregate_short([flow()]), [])
    assert len(g.vertices) == 2 and all(v.kind is VertexKind.SINGLE for v in g.vertices)
    a = g.find_vertex(["10.0.0.1"])
    assert g.out_degree(a) == 1 and g.in_degree(a) == 0


def test_shared_source_dedups_vertex():
    g = InteractionGraph()
    g.add_edges(aggregate_short([flow(dst="10.0.0.2"), flow(dst="10.0.0.3")]))
    assert len(g.vertices) == 3
    assert g.out_degree(g.find_vertex(["10.0.0.1"])) == 2


def test_long_and_short_share_vertices():
    g = build_graph([flow()], [flow(n=20, sport=5)])
    assert len(g.vertices) == 2 and g.n_edges == 2
    assert g.long_edges[0].src == g.short_edges[0].src


def test_group_vertex_needs_two_addresses():
    from flowvision.graph import Vertex
    with pytest.raises(ValueError):
        Vertex(0, VertexKind.GROUP, ("a",))


# --------------------------------------------------------------------------- export / import


def test_empty_round_trip(tmp_path):
    export_graph(InteractionGraph(), tmp_path / "g.json")
    g = import_graph(tmp_path / "g.json")
    assert g == InteractionGraph() and g.n_edges == 0


def test_round_trip_preserves_structure(tmp_path):
    shorts = [flow(dst=f"10.1.0.{i}") for i in range(25)] + [flow(src="2001:db8::1", dst="10.0.0.9")]
    longs = [flow(n=18, sport=7, intervals=np.r_[0, np.full(17, 0.0123)])]
    g = build_graph(shorts, longs)
    export_graph(g, tmp_path / "g.json")
    h = import_graph(tmp_path / "g.json")
    assert h == g and diff(g, h) == []
    assert h.degree_arrays()[0].tolist() == g.degree_arrays()[0].tolist()
    assert h.short_edges[0].member_tuples == g.short_edges[0].member_tuples
    assert h.find_vertex(g.vertices[1].addrs) == 1


def test_truncated_file_is_corrupt(tmp_path):
    g = build_graph([flow()], [])
    export_graph(g, tmp_path / "g.json")
    text = (tmp_path / "g.json").read_text()
    (tmp_path / "bad.json").write_text(text[: len(text) // 2])
    with pytest.raises(GraphFormatError):
        import_graph(tmp_path / "bad.json")


def test_version_mismatch(tmp_path):
    obj = build_graph([flow()], []).to_dict()
    obj["version"] = 99
    (tmp_path / "g.json").write_text(json.dumps(obj))
    with pytest.raises(GraphVersionError, match="99"):
        import_graph(tmp_path / "g.json")


def test_dangling_endpoint_rejected():
    obj = build_graph([flow()], []).to_dict()
    obj["short_edges"][0]["dst"] = 7
    with pytest.raises(GraphFormatError):
        InteractionGraph.from_dict(obj)


def test_diff_reports_changes():
    a = build_graph([flow()], [])
    b = build_graph([flow(lengths=[61, 60, 60])], [])
    assert diff(a, b) and "short_edges[0]" in diff(a, b)[0]


# --------------------------------------------------------------------------- properties


flows_st = st.lists(
    st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 1), st.integers(1, 15)),
    max_size=80,
).map(lambda rows: [flow(src=f"10.0.0.{s}", dst=f"10.0.1.{d}", sport=i, n=n,
                         mask=(1 | SYN << 8) if m else 2)
                    for i, (s, d, m, n) in enumerate(rows)])


@given(flows_st, st.integers(1, 10))
def test_flow_conservation(flows, agg_line):
    edges = aggregate_short(flows, agg_line)
    assert sum(e.flow_count for e in edges) == len(flows)
    assert sorted(k for e in edges for k in e.member_tuples) == sorted(f.key for f in flows)
    assert len(edges) <= len(flows)
    for e in edges:
        if e.agg_kind is AggKind.NO_AGG:
            assert e.flow_count == 1
        else:
            assert e.flow_count > agg_line
        assert len({f.protocol_mask for f in flows if f.key in set(e.member_tuples)}) == 1


@given(flows_st)
def test_repetition_strictly_reduces_edges(flows):
    burst = [flow(sport=5000 + i) for i in range(11)]
    assert len(aggregate_short(flows + burst, 10)) < len(flows) + len(burst)


@given(flows_st, st.integers(1, 10))
def test_degree_index_matches_recount(flows, agg_line):
    longs = [flow(src=f"10.0.0.{i % 3}", n=16 + i, sport=9000 + i) for i in range(3)]
    g = build_graph(flows, longs, agg_line)
    ins, outs = g.degree_arrays()
    assert (ins.tolist(), outs.tolist()) == g.recount_degrees()
    assert all(0 <= e.src < len(g.vertices) and 0 <= e.dst < len(g.vertices)
               for e in g.short_edges + g.long_edges)
    h = InteractionGraph.from_dict(json.loads(json.dumps(g.to_dict())))
    assert h == g


@given(st.lists(st.integers(1, 65535), min_size=16, max_size=60),
       st.lists(st.floats(0, 5, allow_nan=False), min_size=60, max_size=60))
def test_histogram_conservation(lengths, ivals):
    n = len(lengths)
    e = fit_long(flow(lengths=lengths, intervals=[0.0] + ivals[: n - 1]))
    assert e.len_hist.total == e.interval_hist.total == e.proto_hist.total == n
    assert all(c >= 1 for c in e.len_hist.bins.values())
