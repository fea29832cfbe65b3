"""Clustering primitives: min-max normalization, KD-tree, DBSCAN and K-Means.

Distances are Euclidean and neighbourhoods are inclusive: ``y`` is within
``eps`` of ``x`` iff ``sum((x - y) ** 2) <= eps ** 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

NOISE = -1
LEAF_SIZE = 16


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1) if m.size else m.reshape(0, 1)
    if m.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    if m.size and not np.isfinite(m).all():
        raise ValueError("feature matrix contains NaN or inf")
    return m


def minmax_normalize(m) -> np.ndarray:
    """Scale each column to [0, 1]; constant columns become zeros."""
    m = _as_matrix(m)
    if m.shape[0] == 0:
        return m.copy()
    lo = m.min(axis=0)
    span = m.max(axis=0) - lo
    out = np.zeros_like(m)
    ok = span > 0
    out[:, ok] = (m[:, ok] - lo[ok]) / span[ok]
    # Guard against rounding just outside the unit interval.
    np.clip(out, 0.0, 1.0, out=out)
    return out


# --------------------------------------------------------------------------- KD-tree


class KDTree:
    """Static KD-tree: median split on the widest dimension, leaves of at most 16 points."""

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        self.data = _as_matrix(points)
        n, d = self.data.shape
        self.leaf_size = leaf_size
        self.perm = np.arange(n)
        # Node arrays: index range into perm, bounding box, children (-1 for leaves).
        self._lo: list[int] = []
        self._hi: list[int] = []
        self._bmin: list[np.ndarray] = []
        self._bmax: list[np.ndarray] = []
        self._left: list[int] = []
        self._right: list[int] = []
        if n:
            self._build(0, n)
        self.bmin = np.asarray(self._bmin).reshape(-1, d)
        self.bmax = np.asarray(self._bmax).reshape(-1, d)
        self.left = np.asarray(self._left, dtype=np.int64)
        self.right = np.asarray(self._right, dtype=np.int64)
        self.lo = np.asarray(self._lo, dtype=np.int64)
        self.hi = np.asarray(self._hi, dtype=np.int64)
        self.leaves = np.flatnonzero(self.left < 0) if n else np.zeros(0, np.int64)

    def _build(self, lo: int, hi: int) -> int:
        node = len(self._lo)
        pts = self.data[self.perm[lo:hi]]
        bmin, bmax = pts.min(axis=0), pts.max(axis=0)
        self._lo.append(lo)
        self._hi.append(hi)
        self._bmin.append(bmin)
        self._bmax.append(bmax)
        self._left.append(-1)
        self._right.append(-1)
        width = bmax - bmin
        if hi - lo <= self.leaf_size or not (width > 0).any():
            return node
        dim = int(np.argmax(width))
        mid = (hi - lo) // 2
        sub = self.perm[lo:hi]
        part = np.argpartition(self.data[sub, dim], mid, kind="introselect")
        self.perm[lo:hi] = sub[part]
        self._left[node] = self._build(lo, lo + mid)
        self._right[node] = self._build(lo + mid, hi)
        return node

    def __len__(self) -> int:
        return self.data.shape[0]

    def query_radius(self, x, r: float) -> np.ndarray:
        """Sorted indices of points within ``r`` of ``x`` (inclusive)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        r2 = r * r
        slack = r2 * (1 + 1e-9) + 1e-300
        out = []
        stack = [0]
        while stack:
            node = stack.pop()
            gap = np.maximum(0.0, np.maximum(self.bmin[node] - x, x - self.bmax[node]))
            if gap @ gap > slack:
                continue
            if self.left[node] < 0:
                idx = self.perm[self.lo[node]:self.hi[node]]
                diff = self.data[idx] - x
                out.append(idx[np.einsum("ij,ij->i", diff, diff) <= r2])
            else:
                stack.append(self.right[node])
                stack.append(self.left[node])
        return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)

    def leaf_neighbours(self, leaf: int, r: float) -> list[int]:
        """Leaves whose bounding boxes come within ``r`` of ``leaf``'s box."""
        lmin, lmax = self.bmin[leaf], self.bmax[leaf]
        slack = r * r * (1 + 1e-9) + 1e-300
        found = []
        stack = [0]
        while stack:
            node = stack.pop()
            gap = np.maximum(0.0, np.maximum(self.bmin[node] - lmax, lmin - self.bmax[node]))
            if gap @ gap > slack:
                continue
            if self.left[node] < 0:
                found.append(node)
            else:
                stack.append(self.right[node])
                stack.append(self.left[node])
        return found

    def pair_blocks(self, r: float):
        """Yield ``(rows, cols, within)`` blocks covering every pair within ``r``.

        ``rows`` are the points of one leaf, ``cols`` the points of all leaves
        near it, and ``within[i, j]`` the inclusive radius test.
        """
        r2 = r * r
        for leaf in self.leaves.tolist():
            rows = self.perm[self.lo[leaf]:self.hi[leaf]]
            near = self.leaf_neighbours(leaf, r)
            cols = np.concatenate([self.perm[self.lo[v]:self.hi[v]] for v in near])
            diff = self.data[rows][:, None, :] - self.data[cols][None, :, :]
            yield rows, cols, np.einsum("ijk,ijk->ij", diff, diff) <= r2


# --------------------------------------------------------------------------- DBSCAN


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 4e-3
    min_points: int = 40

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps!r}")
        if self.min_points < 1:
            raise ValueError(f"min_points must be >= 1, got {self.min_points!r}")


def dbscan(m, params: DbscanParams | float = DbscanParams(), min_points: Optional[int] = None) -> np.ndarray:
    """Cluster labels per row, ``-1`` for noise.

    A point is core when at least ``min_points`` rows (itself included) lie
    within ``eps``.  Cluster ids follow the lowest row index of their core
    points; a border point reachable from several clusters joins the lowest id.
    Identical rows are collapsed first and carry their multiplicity.
    """
    if not isinstance(params, DbscanParams):
        params = DbscanParams(float(params), int(min_points if min_points is not None else 40))
    m = _as_matrix(m)
    n = m.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    uniq, first, inverse, counts = np.unique(m, axis=0, return_index=True, return_inverse=True,
                                             return_counts=True)
    inverse = inverse.reshape(-1)
    u = uniq.shape[0]
    tree = KDTree(uniq)

    weight = np.zeros(u, dtype=np.int64)
    blocks = []
    for rows, cols, within in tree.pair_blocks(params.eps):
        weight[rows] += within @ counts[cols]
        blocks.append((rows, cols, within))
    core = weight >= params.min_points

    ci, cj, bi, bj = [], [], [], []
    for rows, cols, within in blocks:
        rr, cc = np.nonzero(within)
        gi, gj = rows[rr], cols[cc]
        both = core[gi] & core[gj]
        ci.append(gi[both])
        cj.append(gj[both])
        border = ~core[gi] & core[gj]
        bi.append(gi[border])
        bj.append(gj[border])
    ci = np.concatenate(ci)
    cj = np.concatenate(cj)
    ulabel = np.full(u, NOISE, dtype=np.int64)
    if core.any():
        graph = coo_matrix((np.ones(ci.shape[0], dtype=np.int8), (ci, cj)), shape=(u, u))
        _, comp = connected_components(graph, directed=False)
        core_idx = np.flatnonzero(core)
        comp_core = comp[core_idx]
        # Rank components by the lowest original row index among their core points.
        lowest = np.full(comp.max() + 1, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(lowest, comp_core, first[core_idx])
        used = np.unique(comp_core)
        rank = np.empty(comp.max() + 1, dtype=np.int64)
        rank[used[np.argsort(lowest[used], kind="stable")]] = np.arange(used.shape[0])
        ulabel[core_idx] = rank[comp_core]
        bi = np.concatenate(bi)
        bj = np.concatenate(bj)
        if bi.size:
            best = np.full(u, np.iinfo(np.int64).max, dtype=np.int64)
            np.minimum.at(best, bi, ulabel[bj])
            hit = best != np.iinfo(np.int64).max
            ulabel[hit] = best[hit]
    return ulabel[inverse]


# --------------------------------------------------------------------------- K-Means


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(n, p=d2 / total))
        else:
            i = int(rng.integers(n))
        centers.append(x[i])
        d2 = np.minimum(d2, _sq_dists(x, x[i][None, :])[:, 0])
    return np.array(centers)


def kmeans(m, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's K-Means with k-means++ seeding; effective k is ``min(k, n)``.

    Ties in assignment go to the lowest center index.  An empty cluster is
    reseeded at the point farthest from its current center.
    """
    x = _as_matrix(m)
    n = x.shape[0]
    if n < 1:
        raise ValueError("kmeans needs at least one row")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        size = np.bincount(labels, minlength=k)
        filled = size > 0
        centers = centers.copy()
        centers[filled] = sums[filled] / size[filled, None]
        if not filled.all():
            own = np.einsum("ij,ij->i", x - centers[labels], x - centers[labels])
            for c in np.flatnonzero(~filled):
                far = int(np.argmax(own))
                centers[c] = x[far]
                own[far] = -1.0
    d2 = _sq_dists(x, centers)
    inertia = float(d2[np.arange(n), labels].sum())
    return KMeansResult(centers, labels, inertia, it, history)
