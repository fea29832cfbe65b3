"""Graph pre-processing: connected components, component filtering, edge pre-clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from flowvision.graph import InteractionGraph, LongEdge, ShortEdge
from flowvision.mlcore import NOISE, DbscanParams, dbscan, minmax_normalize

SHORT, LONG = "short", "long"


@dataclass
class Component:
    vertices: list[int]
    short_edges: list[int] = field(default_factory=list)
    long_edges: list[int] = field(default_factory=list)

    @property
    def n_edges(self) -> int:
        return len(self.short_edges) + len(self.long_edges)


@dataclass(frozen=True)
class ComponentStats:
    n_long_flows: int
    n_short_flows: int
    n_short_edges: int
    bytes_long: int
    bytes_short: int

    def as_row(self) -> list[float]:
        return [self.n_long_flows, self.n_short_flows, self.n_short_edges, self.bytes_long, self.bytes_short]


def components(graph: InteractionGraph) -> list[Component]:
    """Weakly connected components, ordered by their lowest vertex id."""
    nv = len(graph.vertices)
    if nv == 0 or graph.n_edges == 0:
        return []
    src = np.asarray([e.src for e in graph.short_edges] + [e.src for e in graph.long_edges], dtype=np.int64)
    dst = np.asarray([e.dst for e in graph.short_edges] + [e.dst for e in graph.long_edges], dtype=np.int64)
    adj = coo_matrix((np.ones(src.shape[0], dtype=np.int8), (src, dst)), shape=(nv, nv))
    _, label = connected_components(adj, directed=True, connection="weak")
    touched = np.zeros(nv, dtype=bool)
    touched[src] = True
    touched[dst] = True
    # Renumber by lowest vertex id so output order is canonical.
    order: dict[int, int] = {}
    comps: list[Component] = []
    for v in np.flatnonzero(touched).tolist():
        lab = int(label[v])
        if lab not in order:
            order[lab] = len(comps)
            comps.append(Component([]))
        comps[order[lab]].vertices.append(v)
    ns = len(graph.short_edges)
    for i, s in enumerate(src.tolist()):
        c = comps[order[int(label[s])]]
        if i < ns:
            c.short_edges.append(i)
        else:
            c.long_edges.append(i - ns)
    return comps


def long_edge_bytes(edge: LongEdge) -> int:
    """Byte estimate from the length histogram using bucket midpoints."""
    return sum((code * 10 + 5) * count for code, count in edge.len_hist.bins.items())


def component_stats(c: Component, graph: InteractionGraph) -> ComponentStats:
    shorts = [graph.short_edges[i] for i in c.short_edges]
    longs = [graph.long_edges[i] for i in c.long_edges]
    return ComponentStats(
        n_long_flows=len(longs),
        n_short_flows=sum(e.flow_count for e in shorts),
        n_short_edges=len(shorts),
        bytes_long=sum(long_edge_bytes(e) for e in longs),
        bytes_short=sum(e.flow_count * int(e.lengths.sum()) for e in shorts),
    )


def nearest_rank(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * N)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(pct / 100.0 * v.shape[0]))
    return float(v[rank - 1])


def component_distances(stats: Sequence[ComponentStats], params: DbscanParams = DbscanParams()) -> np.ndarray:
    """Distance of each component to its nearest cluster center; inf when there are no clusters."""
    x = minmax_normalize(np.asarray([s.as_row() for s in stats], dtype=np.float64).reshape(-1, 5))
    labels = dbscan(x, params)
    ids = np.unique(labels[labels != NOISE])
    if ids.size == 0:
        return np.full(x.shape[0], np.inf)
    centers = np.stack([x[labels == i].mean(axis=0) for i in ids])
    diff = x[:, None, :] - centers[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).min(axis=1)


def filter_components(stats: Sequence[ComponentStats], params: DbscanParams = DbscanParams()
                      ) -> tuple[list[int], list[int]]:
    """Split component indices into (normal, abnormal) by the 99th-percentile distance rule."""
    if not stats:
        return [], []
    dist = component_distances(stats, params)
    if np.isinf(dist).all():
        return [], list(range(len(stats)))
    thr = nearest_rank(dist, 99.0)
    abnormal = dist > thr
    return np.flatnonzero(~abnormal).tolist(), np.flatnonzero(abnormal).tolist()


# --------------------------------------------------------------------------- structural features


def short_flags(edge: ShortEdge) -> tuple[int, int, int, int]:
    members = edge.member_tuples
    k0 = members[0]
    same_src = int(all(k.src_addr == k0.src_addr for k in members))
    same_sport = int(all(k.src_port == k0.src_port for k in members))
    same_dst = int(all(k.dst_addr == k0.dst_addr for k in members))
    same_dport = int(all(k.dst_port == k0.dst_port for k in members))
    return same_src, same_sport, same_dst, same_dport


def edge_struct_features(edge, graph: InteractionGraph) -> np.ndarray:
    degrees = [graph.in_degree(edge.src), graph.out_degree(edge.src),
               graph.in_degree(edge.dst), graph.out_degree(edge.dst)]
    if isinstance(edge, ShortEdge):
        return np.asarray([*short_flags(edge), *degrees], dtype=np.float64)
    return np.asarray(degrees, dtype=np.float64)


def struct_matrix(kind: str, edge_ids: Sequence[int], graph: InteractionGraph) -> np.ndarray:
    """Structural feature rows (8 columns for short edges, 4 for long) for the given edges."""
    edges = graph.short_edges if kind == SHORT else graph.long_edges
    d_in, d_out = graph.degree_arrays()
    src = np.asarray([edges[i].src for i in edge_ids], dtype=np.int64)
    dst = np.asarray([edges[i].dst for i in edge_ids], dtype=np.int64)
    deg = np.stack([d_in[src], d_out[src], d_in[dst], d_out[dst]], axis=1).astype(np.float64) \
        if len(edge_ids) else np.zeros((0, 4))
    if kind == LONG:
        return deg
    flags = np.asarray([short_flags(edges[i]) for i in edge_ids], dtype=np.float64).reshape(-1, 4)
    return np.hstack([flags, deg])


# --------------------------------------------------------------------------- pre-clustering


@dataclass
class PreCluster:
    kind: str
    members: list[int]
    center: int
    time_range: float
    denoted_flows: int

    @property
    def size(self) -> int:
        return len(self.members)


def medoid(points: np.ndarray, ids: Sequence[int]) -> int:
    """Member minimizing summed distance to all members; ties go to the lowest id."""
    ids = np.asarray(ids)
    uniq, inverse, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    cost = np.zeros(uniq.shape[0])
    step = max(1, 4_000_000 // max(1, uniq.shape[0]))
    for lo in range(0, uniq.shape[0], step):
        diff = uniq[lo:lo + step, None, :] - uniq[None, :, :]
        cost[lo:lo + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) @ counts
    best_rows = np.flatnonzero(cost == cost.min())
    return int(ids[np.isin(inverse, best_rows)].min())


def pre_cluster(kind: str, edge_ids: Sequence[int], graph: InteractionGraph,
                params: DbscanParams = DbscanParams()) -> list[PreCluster]:
    """DBSCAN the edges' structural features; each cluster is represented by its medoid.

    Noise edges become singleton pre-clusters.  Output is ordered by lowest member id.
    """
    edge_ids = list(edge_ids)
    if not edge_ids:
        return []
    edges = graph.short_edges if kind == SHORT else graph.long_edges
    x = minmax_normalize(struct_matrix(kind, edge_ids, graph))
    labels = dbscan(x, params)
    ids = np.asarray(edge_ids)
    first = np.asarray([e.first_ts for e in (edges[i] for i in edge_ids)])
    last = np.asarray([e.last_ts for e in (edges[i] for i in edge_ids)])
    flows = np.asarray([edges[i].flow_count for i in edge_ids], dtype=np.int64)
    out: list[PreCluster] = []
    for lab in np.unique(labels[labels != NOISE]).tolist():
        sel = np.flatnonzero(labels == lab)
        members = ids[sel]
        center = medoid(x[sel], members)
        denoted = int(flows[sel].sum()) if kind == SHORT else int(sel.shape[0])
        out.append(PreCluster(kind, sorted(members.tolist()), center,
                              float(last[sel].max() - first[sel].min()), denoted))
    for i in np.flatnonzero(labels == NOISE).tolist():
        out.append(PreCluster(kind, [int(ids[i])], int(ids[i]), float(last[i] - first[i]),
                              int(flows[i]) if kind == SHORT else 1))
    out.sort(key=lambda p: p.members[0])
    return out
