import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowvision.graph import InteractionGraph, aggregate_short, build_graph, fit_long
from flowvision.mlcore import DbscanParams, minmax_normalize
from flowvision.preprocess import (
    LONG, SHORT, ComponentStats, component_distances, component_stats, components, edge_struct_features,
    filter_components, long_edge_bytes, medoid, nearest_rank, pre_cluster, struct_matrix,
)
from oracles import euclid, minmax_scalar, naive_dbscan, nearest_rank_scalar, union_find_groups
from traces import make_flow as flow


def stats(n_long=0, n_short=1, n_edges=1, b_long=0, b_short=60):
    return ComponentStats(n_long, n_short, n_edges, b_long, b_short)


# --------------------------------------------------------------------------- components


def test_two_disjoint_edges():
    g = build_graph([flow("a", "b"), flow("c", "d")], [])
    assert len(components(g)) == 2


def test_path_is_one_component():
    g = build_graph([flow("a", "b"), flow("b", "c")], [])
    (c,) = components(g)
    assert c.n_edges == 2 and sorted(c.vertices) == [0, 1, 2]


def test_empty_graph_has_no_components():
    assert components(InteractionGraph()) == []


def test_long_edges_join_components():
    g = build_graph([flow("a", "b")], [flow("b", "c", n=20)])
    (c,) = components(g)
    assert c.short_edges == [0] and c.long_edges == [0]


@given(st.integers(1, 25).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=40))))
def test_components_match_union_find(case):
    n, pairs = case
    g = build_graph([flow(f"h{u}", f"h{v}", sport=i) for i, (u, v) in enumerate(pairs)], [], agg_line=10 ** 6)
    got = {frozenset(c.vertices) for c in components(g)}
    edges = [(e.src, e.dst) for e in g.short_edges]
    assert got == union_find_groups(len(g.vertices), edges)
    assert sorted(i for c in components(g) for i in c.short_edges) == list(range(len(g.short_edges)))


# --------------------------------------------------------------------------- stats


def test_long_bytes_midpoint_rule():
    g = build_graph([], [flow(n=16, lengths=[100] * 16)])
    s = component_stats(components(g)[0], g)
    assert s.n_long_flows == 1 and s.bytes_long == 16 * 105


def test_short_bytes_single_edge():
    g = build_graph([flow(lengths=[60, 60])], [])
    assert component_stats(components(g)[0], g).bytes_short == 120


def test_short_bytes_multiply_by_flow_count():
    fs = [flow(sport=i, lengths=[60, 60, 60]) for i in range(25)]
    g = build_graph(fs, [])
    s = component_stats(components(g)[0], g)
    assert (s.n_short_flows, s.n_short_edges, s.bytes_short) == (25, 1, 4500)


def test_long_edge_bytes_direct():
    assert long_edge_bytes(fit_long(flow(n=16, lengths=[9] * 8 + [1514] * 8))) == 8 * 5 + 8 * 1515


# --------------------------------------------------------------------------- filtering


def test_nearest_rank_examples():
    assert nearest_rank(np.arange(1, 101), 99) == 99
    assert nearest_rank([5.0], 99) == 5.0
    assert nearest_rank([3, 1, 2], 50) == 2


@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=300), st.floats(0.1, 100))
def test_nearest_rank_matches_scalar(values, pct):
    assert nearest_rank(values, pct) == nearest_rank_scalar(values, pct)


def test_outlier_component_is_abnormal():
    rows = [stats()] * 200 + [stats(n_long=40, n_short=5000, n_edges=300, b_long=10 ** 8, b_short=10 ** 6)]
    normal, abnormal = filter_components(rows)
    assert abnormal == [200] and normal == list(range(200))
    # Scalar reference: normalize, cluster, distance to the single center, nearest-rank cut.
    x = minmax_scalar([r.as_row() for r in rows])
    labels = naive_dbscan(np.array(x), 4e-3, 40)
    members = [x[i] for i in range(len(x)) if labels[i] == 0]
    center = [sum(c) / len(members) for c in zip(*members)]
    dist = [euclid(r, center) for r in x]
    thr = nearest_rank_scalar(dist, 99)
    assert [i for i, d in enumerate(dist) if d > thr] == abnormal
    assert np.allclose(component_distances(rows), dist, atol=1e-12)


def test_single_component_is_abnormal():
    assert filter_components([stats()]) == ([], [0])


def test_identical_components_are_normal():
    assert filter_components([stats()] * 50) == (list(range(50)), [])


def test_all_noise_marks_everything_abnormal():
    rows = [stats(n_short=i) for i in range(10)]
    assert filter_components(rows, DbscanParams(1e-3, 40)) == ([], list(range(10)))


def test_no_components():
    assert filter_components([]) == ([], [])


@given(st.lists(st.integers(0, 10 ** 6), min_size=2, max_size=300, unique=True))
def test_distinct_distances_flag_at_most_one_percent(values):
    rows = [stats(n_short=v) for v in values]
    dist = component_distances(rows, DbscanParams(0.05, 2))
    normal, abnormal = filter_components(rows, DbscanParams(0.05, 2))
    assert sorted(normal + abnormal) == list(range(len(rows)))
    if np.isfinite(dist).all() and len(set(dist.tolist())) == len(dist):
        assert len(abnormal) <= math.ceil(0.01 * len(rows))


# --------------------------------------------------------------------------- structural features


def test_noagg_flags_all_set():
    g = build_graph([flow()], [])
    assert edge_struct_features(g.short_edges[0], g)[:4].tolist() == [1, 1, 1, 1]


def test_srcagg_flags():
    g = build_graph([flow(dst=f"10.1.0.{i}", dport=1000 + i) for i in range(25)], [])
    f = edge_struct_features(g.short_edges[0], g)
    assert f[0] == 1 and f[2] == 0 and f[3] == 0 and f[1] == 1


def test_long_edge_degrees():
    longs = [flow("A", f"B{i}", n=16) for i in range(3)]
    g = build_graph([], longs)
    f = edge_struct_features(g.long_edges[0], g)
    assert f.tolist() == [0, 3, 1, 0]


def test_struct_matrix_matches_per_edge():
    fs = [flow(f"s{i % 4}", f"d{i % 3}", sport=i) for i in range(30)]
    g = build_graph(fs, [flow("s0", "d9", n=20), flow("d9", "s0", n=20)])
    ids = list(range(len(g.short_edges)))
    m = struct_matrix(SHORT, ids, g)
    assert m.shape == (len(ids), 8)
    assert np.array_equal(m, np.stack([edge_struct_features(g.short_edges[i], g) for i in ids]))
    ml = struct_matrix(LONG, [0, 1], g)
    assert np.array_equal(ml, np.stack([edge_struct_features(e, g) for e in g.long_edges]))
    assert struct_matrix(LONG, [], g).shape == (0, 4)


# --------------------------------------------------------------------------- pre-clustering


def test_identical_edges_form_one_precluster():
    g = build_graph([flow(f"s{i}", f"d{i}", t0=i) for i in range(50)], [])
    (p,) = pre_cluster(SHORT, range(50), g)
    assert p.size == 50 and p.center == 0 and p.denoted_flows == 50
    assert p.time_range == pytest.approx(49.02)


def test_scattered_edges_are_singletons():
    fs = [flow("hub", f"d{i}", sport=i) for i in range(10)]
    g = build_graph(fs, [], agg_line=100)
    out = pre_cluster(SHORT, range(10), g, DbscanParams(4e-3, 40))
    assert [p.members for p in out] == [[i] for i in range(10)]
    assert all(p.center == p.members[0] and p.denoted_flows == 1 for p in out)


def test_two_groups_match_reference_dbscan():
    # Group one: 50 isolated pairs. Group two: 50 spokes of a hub.
    fs = [flow(f"a{i}", f"b{i}") for i in range(50)] + [flow("hub", f"c{i}", sport=i) for i in range(50)]
    g = build_graph(fs, [], agg_line=1000)
    ids = list(range(100))
    out = pre_cluster(SHORT, ids, g)
    assert [p.size for p in out] == [50, 50]
    labels = naive_dbscan(minmax_normalize(struct_matrix(SHORT, ids, g)), 4e-3, 40)
    assert sorted(map(tuple, (p.members for p in out))) == sorted(
        tuple(np.flatnonzero(labels == k).tolist()) for k in set(labels.tolist()))


def test_long_denoted_counts_edges():
    g = build_graph([], [flow(f"s{i}", f"d{i}", n=20) for i in range(45)])
    (p,) = pre_cluster(LONG, range(45), g)
    assert p.denoted_flows == 45 and p.kind == LONG


def test_medoid_examples():
    pts = np.array([[0.0], [1.0], [2.0], [10.0]])
    assert medoid(pts, [7, 8, 9, 10]) == 8
    assert medoid(np.zeros((3, 2)), [5, 3, 4]) == 3


def test_empty_precluster():
    assert pre_cluster(SHORT, [], InteractionGraph()) == []


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.floats(0, 100)), min_size=1, max_size=60),
       st.integers(1, 5))
def test_precluster_partitions_edges(rows, mp):
    fs = [flow(f"s{a}", f"d{b}", sport=i, t0=t) for i, (a, b, t) in enumerate(rows)]
    g = build_graph(fs, [], agg_line=1000)
    ids = list(range(len(g.short_edges)))
    out = pre_cluster(SHORT, ids, g, DbscanParams(0.2, mp))
    assert sorted(m for p in out for m in p.members) == ids
    for p in out:
        assert p.center in p.members and p.time_range >= 0
        if p.size == 1:
            e = g.short_edges[p.members[0]]
            assert p.time_range == e.last_ts - e.first_ts
