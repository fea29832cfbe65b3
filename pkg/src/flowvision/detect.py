"""Detection: critical vertices, per-vertex clustering, edge loss and verdicts."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from flowvision.config import Config
from flowvision.graph import InteractionGraph, LongEdge, ShortEdge
from flowvision.mlcore import DbscanParams, kmeans, minmax_normalize
from flowvision.preprocess import (LONG, SHORT, PreCluster, component_stats, components, filter_components,
                                   pre_cluster, struct_matrix)

# --------------------------------------------------------------------------- vertex cover


def _popcount(x: int) -> int:
    return bin(x).count("1")


class _ExactCover:
    """Branch-and-bound minimum vertex cover on a small graph stored as bitmasks."""

    def __init__(self, n: int, edges: Iterable[tuple[int, int]]):
        self.n = n
        self.adj = [0] * n
        self.loops = 0
        for u, v in edges:
            if u == v:
                self.loops |= 1 << u
            else:
                self.adj[u] |= 1 << v
                self.adj[v] |= 1 << u
        self._memo: dict[int, int] = {}

    def size(self, alive: int) -> int:
        """Minimum cover size of the subgraph induced by ``alive`` (loops excluded)."""
        memo = self._memo
        if alive in memo:
            return memo[alive]
        adj = self.adj
        taken = 0
        cur = alive
        # Degree reductions: drop isolated vertices, take the neighbour of a leaf.
        changed = True
        while changed:
            changed = False
            bits = cur
            while bits:
                low = bits & -bits
                v = low.bit_length() - 1
                bits ^= low
                if not cur & low:
                    continue
                nb = adj[v] & cur
                if nb == 0:
                    cur &= ~low
                    changed = True
                elif nb & (nb - 1) == 0:
                    cur &= ~(low | nb)
                    taken += 1
                    changed = True
        if cur == 0:
            memo[alive] = taken
            return taken
        # Branch on a maximum-degree vertex: take it, or take all its neighbours.
        best_v, best_d = -1, -1
        bits = cur
        while bits:
            low = bits & -bits
            v = low.bit_length() - 1
            bits ^= low
            d = _popcount(adj[v] & cur)
            if d > best_d:
                best_v, best_d = v, d
        low = 1 << best_v
        nb = adj[best_v] & cur
        with_v = 1 + self.size(cur & ~low)
        if best_d >= with_v:  # taking every neighbour cannot do better
            result = with_v
        else:
            result = min(with_v, best_d + self.size(cur & ~(low | nb)))
        memo[alive] = taken + result
        return taken + result

    def solve(self) -> list[int]:
        """Minimum cover preferring lower indices (lexicographically first indicator)."""
        full = (1 << self.n) - 1
        forced = self.loops
        alive = full & ~forced
        count = _popcount(forced)
        opt = count + self.size(alive)
        chosen = forced
        for v in range(self.n):
            low = 1 << v
            if not alive & low:
                continue
            if count + 1 + self.size(alive & ~low) == opt:
                chosen |= low
                alive &= ~low
                count += 1
            else:
                nb = self.adj[v] & alive
                chosen |= nb
                count += _popcount(nb)
                alive &= ~(low | nb)
        return [v for v in range(self.n) if chosen >> v & 1]


def exact_vertex_cover(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    """Minimum vertex cover of a graph on vertices 0..n-1; lowest-index tie-break."""
    return _ExactCover(n, edges).solve()


def _prune(cover: set[int], nbrs: dict[int, set[int]], loops: set[int]) -> set[int]:
    """Drop cover vertices whose neighbours are all covered, highest index first."""
    for v in sorted(cover, reverse=True):
        if v not in loops and nbrs[v] <= cover - {v}:
            cover.discard(v)
    return cover


def max_degree_cover(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    """Greedy cover: repeatedly take the vertex of highest remaining degree (lowest index on ties)."""
    nbrs: dict[int, set[int]] = {v: set() for v in range(n)}
    cover: set[int] = set()
    for u, v in edges:
        if u == v:
            cover.add(u)
        else:
            nbrs[u].add(v)
            nbrs[v].add(u)
    remaining = {v: set(s) for v, s in nbrs.items()}
    for v in cover:
        for w in remaining[v]:
            remaining[w].discard(v)
        remaining[v] = set()
    heap = [(-len(s), v) for v, s in remaining.items() if s]
    heapq.heapify(heap)
    while heap:
        d, v = heapq.heappop(heap)
        if -d != len(remaining[v]) or not remaining[v]:
            if remaining[v]:
                heapq.heappush(heap, (-len(remaining[v]), v))
            continue
        cover.add(v)
        for w in remaining[v]:
            remaining[w].discard(v)
            if remaining[w]:
                heapq.heappush(heap, (-len(remaining[w]), w))
        remaining[v] = set()
    return sorted(cover)


def matching_cover(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    """Both endpoints of a maximal matching (edges scanned in sorted order)."""
    cover: set[int] = set()
    for u, v in sorted((min(e), max(e)) for e in edges):
        if u not in cover and v not in cover:
            cover.update((u, v))
    return sorted(cover)


def approx_vertex_cover(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    """Greedy max-degree cover, guarded by a maximal-matching cover so the result is within 2x optimal."""
    nbrs: dict[int, set[int]] = {v: set() for v in range(n)}
    loops = set()
    for u, v in edges:
        if u == v:
            loops.add(u)
        else:
            nbrs[u].add(v)
            nbrs[v].add(u)
    a = sorted(_prune(set(max_degree_cover(n, edges)), nbrs, loops))
    b = sorted(_prune(set(matching_cover(n, edges)), nbrs, loops))
    return min(a, b, key=lambda c: (len(c), c))


def critical_vertices(vertex_edges: Sequence[tuple[int, int]], exact_cutoff: int = 30) -> list[int]:
    """Vertex cover of the given edges, as sorted global vertex ids.

    Exact when at most ``exact_cutoff`` vertices are involved, otherwise the
    guarded greedy cover.
    """
    ids = sorted({v for e in vertex_edges for v in e})
    if not ids:
        return []
    local = {v: i for i, v in enumerate(ids)}
    edges = [(local[u], local[v]) for u, v in vertex_edges]
    if len(ids) <= exact_cutoff:
        cover = exact_vertex_cover(len(ids), edges)
    else:
        cover = approx_vertex_cover(len(ids), edges)
    return [ids[i] for i in cover]


def is_cover(edges: Iterable[tuple[int, int]], cover: Iterable[int]) -> bool:
    c = set(cover)
    return all(u in c or v in c for u, v in edges)


# --------------------------------------------------------------------------- features and clustering


def short_stat_features(edge: ShortEdge) -> list[float]:
    n = len(edge.lengths)
    return [edge.flow_count, n, float(edge.lengths.sum()), edge.protocol_mask,
            float(edge.intervals.mean()) if n else 0.0]


def long_stat_features(edge: LongEdge) -> list[float]:
    rate = edge.pkt_count / edge.fct if edge.fct > 0 else float(edge.pkt_count)
    len_count, len_code = edge.len_hist.max_bin()
    proto_count, proto_code = edge.proto_hist.max_bin()
    return [edge.fct, rate, edge.pkt_count, len_count, len_code, proto_count, proto_code]


def full_features(kind: str, edge_ids: Sequence[int], graph: InteractionGraph) -> np.ndarray:
    """Structural plus statistical rows: 13 columns for short edges, 11 for long."""
    struct = struct_matrix(kind, edge_ids, graph)
    if kind == SHORT:
        stats = [short_stat_features(graph.short_edges[i]) for i in edge_ids]
        width = 5
    else:
        stats = [long_stat_features(graph.long_edges[i]) for i in edge_ids]
        width = 7
    return np.hstack([struct, np.asarray(stats, dtype=np.float64).reshape(-1, width)])


@dataclass
class ClusterModel:
    centers: np.ndarray
    rows: np.ndarray
    labels: np.ndarray

    def distances(self) -> np.ndarray:
        diff = self.rows[:, None, :] - self.centers[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).min(axis=1)


def vertex_cluster(features: np.ndarray, k: int, seed: int) -> ClusterModel:
    """Min-max normalize the vertex's edge rows locally and run K-Means on them."""
    rows = minmax_normalize(features)
    res = kmeans(rows, k, seed)
    return ClusterModel(res.centers, rows, res.labels)


# --------------------------------------------------------------------------- loss


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.5
    gamma: float = 1.7
    threshold: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "threshold"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def from_config(cls, cfg: Config) -> LossWeights:
        return cls(cfg.alpha, cfg.beta, cfg.gamma, cfg.threshold)


@dataclass(frozen=True)
class LossParts:
    loss: float
    loss_center: float
    loss_cluster: float
    loss_count: float


def combine_loss(loss_center: float, time_range: float, denoted_flows: int, w: LossWeights = LossWeights()
                 ) -> LossParts:
    loss_count = math.log2(denoted_flows + 1)
    loss = w.alpha * loss_center - w.beta * time_range + w.gamma * loss_count
    return LossParts(loss, loss_center, time_range, loss_count)


def edge_loss(loss_center: float, pc: PreCluster, w: LossWeights = LossWeights()) -> LossParts:
    return combine_loss(loss_center, pc.time_range, pc.denoted_flows, w)


def is_malicious(loss: float, w: LossWeights = LossWeights()) -> bool:
    return loss > w.threshold


@dataclass
class DetectionVerdict:
    kind: str
    index: int
    loss: float
    loss_center: Optional[float]
    loss_cluster: Optional[float]
    loss_count: Optional[float]
    malicious: bool
    vertex: Optional[int]
    src: int = -1
    dst: int = -1
    flow_count: int = 1

    @property
    def edge_id(self) -> str:
        return f"{'S' if self.kind == SHORT else 'L'}{self.index}"

    def to_json(self, graph: Optional[InteractionGraph] = None) -> dict:
        def num(x):
            return None if x is None or not math.isfinite(x) else x

        src = graph.vertices[self.src].label if graph is not None else self.src
        dst = graph.vertices[self.dst].label if graph is not None else self.dst
        return {
            "edge_id": self.edge_id,
            "kind": self.kind,
            "src": src,
            "dst": dst,
            "flow_count": self.flow_count,
            "loss": num(self.loss),
            "loss_center": num(self.loss_center),
            "loss_cluster": num(self.loss_cluster),
            "loss_count": num(self.loss_count),
            "malicious": self.malicious,
            "vertex": self.vertex,
        }


@dataclass
class DetectStats:
    n_components: int = 0
    n_abnormal: int = 0
    n_preclusters: int = 0
    n_critical: int = 0
    preprocess_s: float = 0.0
    detect_s: float = 0.0


def detect(graph: InteractionGraph, config: Config = Config(), stats: Optional[DetectStats] = None
           ) -> list[DetectionVerdict]:
    """Verdicts for every edge: short edges by index, then long edges by index."""
    import time

    stats = stats if stats is not None else DetectStats()
    w = LossWeights.from_config(config)
    params = DbscanParams(config.eps, config.min_points)
    verdicts: dict[tuple[str, int], DetectionVerdict] = {}

    def edge_of(kind, i):
        return graph.short_edges[i] if kind == SHORT else graph.long_edges[i]

    def benign(kind, i):
        e = edge_of(kind, i)
        return DetectionVerdict(kind, i, -math.inf, None, None, None, False, None, e.src, e.dst, e.flow_count)

    t0 = time.perf_counter()
    comps = components(graph)
    stats.n_components = len(comps)
    normal, abnormal = filter_components([component_stats(c, graph) for c in comps], params)
    stats.n_abnormal = len(abnormal)
    for ci in normal:
        for i in comps[ci].short_edges:
            verdicts[(SHORT, i)] = benign(SHORT, i)
        for i in comps[ci].long_edges:
            verdicts[(LONG, i)] = benign(LONG, i)
    work = []
    for ci in abnormal:
        c = comps[ci]
        pcs = pre_cluster(SHORT, c.short_edges, graph, params) + pre_cluster(LONG, c.long_edges, graph, params)
        stats.n_preclusters += len(pcs)
        work.append(pcs)
    t1 = time.perf_counter()
    stats.preprocess_s += t1 - t0

    for pcs in work:
        by_center = {(pc.kind, pc.center): pc for pc in pcs}
        center_edges = [edge_of(k, i) for k, i in by_center]
        cover = critical_vertices([(e.src, e.dst) for e in center_edges], config.vc_exact_cutoff)
        stats.n_critical += len(cover)
        incident: dict[tuple[int, str], list[int]] = {}
        for (k, i), e in zip(by_center, center_edges):
            incident.setdefault((e.src, k), []).append(i)
            if e.dst != e.src:
                incident.setdefault((e.dst, k), []).append(i)
        best: dict[tuple[str, int], tuple[LossParts, int]] = {}
        for v in cover:
            for kind in (SHORT, LONG):
                ids = incident.get((v, kind))
                if not ids:
                    continue
                model = vertex_cluster(full_features(kind, ids, graph), config.k, config.seed)
                for i, dist in zip(ids, model.distances().tolist()):
                    parts = edge_loss(dist, by_center[(kind, i)], w)
                    prev = best.get((kind, i))
                    if prev is None or parts.loss > prev[0].loss:
                        best[(kind, i)] = (parts, v)
        for (kind, center), pc in by_center.items():
            parts, v = best[(kind, center)]
            mal = is_malicious(parts.loss, w)
            for i in pc.members:
                e = edge_of(kind, i)
                verdicts[(kind, i)] = DetectionVerdict(kind, i, parts.loss, parts.loss_center, parts.loss_cluster,
                                                       parts.loss_count, mal, v, e.src, e.dst, e.flow_count)
    stats.detect_s += time.perf_counter() - t1
    return [verdicts[(SHORT, i)] for i in range(len(graph.short_edges))] + \
           [verdicts[(LONG, i)] for i in range(len(graph.long_edges))]
