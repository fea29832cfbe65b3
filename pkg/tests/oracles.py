"""Slow, deliberately naive reference implementations used only by the tests.

Each one is written from the textual rule it checks, without reusing any
package internals, so agreement with the package is meaningful.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterable, Sequence

import numpy as np


# --------------------------------------------------------------------------- flow table


def _mask(proto: int, flags: int) -> int:
    m = 1 << int(proto)
    if int(proto) == 0:  # TCP carries its flag byte in the high half
        m |= (int(flags) & 0xFF) << 8
    return m


def _flow_signature(key, pkts) -> tuple:
    masks = [_mask(p[5], p[6]) for p in pkts]
    lengths = [int(p[7]) for p in pkts]
    intervals = [0.0]
    for a, b in zip(pkts, pkts[1:]):
        intervals.append(max(0.0, b[0] - a[0]))
    ts = [p[0] for p in pkts]
    return (tuple(key), masks, lengths, intervals, min(ts), max(ts), int(pkts[0][5]))


def replay_flows(packets: Iterable[Sequence], judge_interval: float = 1.0, pkt_timeout: float = 10.0,
                 flow_line: int = 15) -> list[tuple[float, str, tuple]]:
    """Replay packets through the textbook loop and list (sweep time, class, signature).

    Packets are ``(ts, src, dst, sport, dport, proto, flags, length)`` rows.
    The timer follows the newest timestamp seen; a completion check runs
    whenever more than ``judge_interval`` has passed since the previous one,
    and the leftovers are drained at the end.
    """
    table: dict[tuple, list] = {}
    out = []
    time_now = None
    last_check = None

    def emit(t, key, pkts, final=False):
        cls = "long" if len(pkts) > flow_line else "short"
        out.append((t, cls, _flow_signature(key, pkts), final))

    for pkt in packets:
        key = (pkt[1], pkt[2], int(pkt[3]), int(pkt[4]))
        if key in table:
            table[key].append(pkt)
        else:
            table[key] = [pkt]
        time_now = pkt[0] if time_now is None else max(time_now, pkt[0])
        if last_check is None:
            last_check = time_now
        if time_now - last_check > judge_interval:
            for k in list(table):
                if time_now - table[k][-1][0] > pkt_timeout:
                    emit(time_now, k, table.pop(k))
            last_check = time_now
    for k in list(table):
        emit(time_now if time_now is not None else 0.0, k, table.pop(k), True)
    return out


# --------------------------------------------------------------------------- DBSCAN


def naive_dbscan(x: np.ndarray, eps: float, min_points: int) -> np.ndarray:
    """Sequential DBSCAN: visit rows in index order, expand each new cluster breadth-first.

    Border points keep the first cluster that reaches them.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    r2 = eps * eps
    nbrs = []
    for i in range(n):
        d2 = ((x - x[i]) ** 2).sum(axis=1)
        nbrs.append(np.flatnonzero(d2 <= r2))
    core = np.array([len(nb) >= min_points for nb in nbrs], dtype=bool)
    labels = np.full(n, -1, dtype=np.int64)
    cid = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cid
        queue = [i]
        while queue:
            j = queue.pop(0)
            if not core[j]:
                continue
            for t in nbrs[j]:
                if labels[t] == -1:
                    labels[t] = cid
                    queue.append(t)
        cid += 1
    return labels


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    """Labels agree up to a renaming of cluster ids (noise -1 must match exactly)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or not np.array_equal(a == -1, b == -1):
        return False
    fwd, back = {}, {}
    for u, v in zip(a.tolist(), b.tolist()):
        if fwd.setdefault(u, v) != v or back.setdefault(v, u) != u:
            return False
    return True


# --------------------------------------------------------------------------- vertex cover


def brute_vertex_cover_size(n: int, edges: Sequence[tuple[int, int]]) -> int:
    for size in range(n + 1):
        for cand in itertools.combinations(range(n), size):
            c = set(cand)
            if all(u in c or v in c for u, v in edges):
                return size
    return n


def brute_vertex_covers(n: int, edges: Sequence[tuple[int, int]]) -> list[tuple[int, ...]]:
    """All minimum covers, in lexicographic order."""
    size = brute_vertex_cover_size(n, edges)
    return [cand for cand in itertools.combinations(range(n), size)
            if all(u in cand or v in cand for u, v in edges)]


# --------------------------------------------------------------------------- k-means


def brute_two_means(x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Minimum within-cluster SSE over every split of the rows into two non-empty groups."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    best = (math.inf, [])
    for bits in range(1, 2 ** (n - 1)):
        side = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        groups = [x[side], x[~side]]
        sse = sum(float(((g - g.mean(axis=0)) ** 2).sum()) for g in groups)
        if sse < best[0]:
            best = (sse, [g.mean(axis=0) for g in groups])
    return best


# --------------------------------------------------------------------------- components


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def union_find_groups(n: int, edges: Sequence[tuple[int, int]]) -> set[frozenset[int]]:
    """Vertex sets of the components that contain at least one edge."""
    uf = UnionFind(n)
    for u, v in edges:
        uf.union(u, v)
    groups: dict[int, set[int]] = {}
    for u, v in edges:
        groups.setdefault(uf.find(u), set()).update((u, v))
    return {frozenset(g) for g in groups.values()}


# --------------------------------------------------------------------------- scalar references


def nearest_rank_scalar(values: Sequence[float], pct: float) -> float:
    ordered = sorted(values)
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def minmax_scalar(rows: Sequence[Sequence[float]]) -> list[list[float]]:
    cols = list(zip(*rows))
    out_cols = []
    for col in cols:
        lo, hi = min(col), max(col)
        out_cols.append([0.0 if hi == lo else (v - lo) / (hi - lo) for v in col])
    return [list(r) for r in zip(*out_cols)]


def euclid(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def binomial_entropy(s: int, p: float) -> float:
    """Exact Shannon entropy (nats) of Binomial(s, p)."""
    h = 0.0
    for k in range(s + 1):
        pk = math.comb(s, k) * p ** k * (1 - p) ** (s - k)
        if pk > 0:
            h -= pk * math.log(pk)
    return h
