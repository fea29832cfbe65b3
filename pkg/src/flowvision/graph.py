"""Flow interaction graph: short-flow aggregation, long-flow histograms, export/import."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from flowvision.flowtable import FlowKey, FlowRecord
from flowvision.ingest import PerPacketFeature

GRAPH_VERSION = 1
LEN_BUCKET = 10  # bytes
INTERVAL_BUCKET = 1e-3  # seconds
MAX_CODE = 2**31 - 1


class GraphFormatError(ValueError):
    """Graph file is corrupt or has an unexpected layout."""


class GraphVersionError(GraphFormatError):
    """Graph file was written by an incompatible format version."""


@dataclass
class Histogram:
    bucket_width: float
    bins: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_codes(cls, codes: np.ndarray, bucket_width: float) -> Histogram:
        keys, counts = np.unique(np.asarray(codes, dtype=np.int64), return_counts=True)
        return cls(bucket_width, {int(k): int(c) for k, c in zip(keys, counts)})

    @property
    def total(self) -> int:
        return sum(self.bins.values())

    def max_bin(self) -> tuple[int, int]:
        """(count, code) of the fullest bin; ties go to the lowest code."""
        if not self.bins:
            return 0, 0
        code = min(self.bins, key=lambda c: (-self.bins[c], c))
        return self.bins[code], code

    def to_json(self) -> dict:
        return {"bucket_width": self.bucket_width, "bins": [[k, v] for k, v in sorted(self.bins.items())]}

    @classmethod
    def from_json(cls, obj: dict) -> Histogram:
        return cls(float(obj["bucket_width"]), {int(k): int(v) for k, v in obj["bins"]})


def length_codes(lengths: np.ndarray) -> np.ndarray:
    return np.asarray(lengths, dtype=np.int64) // LEN_BUCKET


def interval_codes(intervals: np.ndarray) -> np.ndarray:
    # Milliseconds first, with a tiny guard so 0.003 s lands in bucket 3, not 2.
    ms = np.asarray(intervals, dtype=np.float64) * 1000.0
    codes = np.floor(np.minimum(ms + 1e-6, float(MAX_CODE)))
    return np.maximum(codes, 0).astype(np.int64)


class VertexKind(Enum):
    SINGLE = "single"
    GROUP = "group"


@dataclass(frozen=True)
class Vertex:
    id: int
    kind: VertexKind
    addrs: tuple[str, ...]

    def __post_init__(self):
        if self.kind is VertexKind.GROUP and len(set(self.addrs)) < 2:
            raise ValueError("a group vertex needs at least two distinct addresses")
        if self.kind is VertexKind.SINGLE and len(self.addrs) != 1:
            raise ValueError("a single vertex has exactly one address")

    @property
    def label(self) -> str:
        if self.kind is VertexKind.SINGLE:
            return self.addrs[0]
        digest = hashlib.sha1("\n".join(self.addrs).encode()).hexdigest()[:12]
        return f"group[{len(self.addrs)}]:{digest}"


class AggKind(Enum):
    SRC_AGG = "SrcAgg"
    DST_AGG = "DstAgg"
    BOTH_AGG = "BothAgg"
    NO_AGG = "NoAgg"


@dataclass(eq=False)
class ShortEdge:
    agg_kind: AggKind
    masks: np.ndarray
    lengths: np.ndarray
    intervals: np.ndarray
    member_tuples: list[FlowKey]
    first_ts: float
    last_ts: float
    protocol_mask: int
    src_addrs: tuple[str, ...] = ()
    dst_addrs: tuple[str, ...] = ()
    src: int = -1
    dst: int = -1

    @property
    def flow_count(self) -> int:
        return len(self.member_tuples)

    @property
    def representative_features(self) -> list[PerPacketFeature]:
        return [PerPacketFeature(int(m), int(n), float(i)) for m, n, i in zip(self.masks, self.lengths, self.intervals)]

    def to_json(self) -> dict:
        return {
            "agg_kind": self.agg_kind.value,
            "src": self.src,
            "dst": self.dst,
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
            "protocol_mask": self.protocol_mask,
            "members": [list(k) for k in self.member_tuples],
            "features": {"masks": self.masks.tolist(), "lengths": self.lengths.tolist(),
                         "intervals": self.intervals.tolist()},
        }

    @classmethod
    def from_json(cls, obj: dict, vertices: dict[int, Vertex]) -> ShortEdge:
        f = obj["features"]
        src, dst = int(obj["src"]), int(obj["dst"])
        return cls(
            AggKind(obj["agg_kind"]),
            np.asarray(f["masks"], dtype=np.uint16),
            np.asarray(f["lengths"], dtype=np.int64),
            np.asarray(f["intervals"], dtype=np.float64),
            [FlowKey(str(a), str(b), int(c), int(d)) for a, b, c, d in obj["members"]],
            float(obj["first_ts"]),
            float(obj["last_ts"]),
            int(obj["protocol_mask"]),
            vertices[src].addrs,
            vertices[dst].addrs,
            src,
            dst,
        )


@dataclass(eq=False)
class LongEdge:
    key: FlowKey
    len_hist: Histogram
    interval_hist: Histogram
    proto_hist: Histogram
    fct: float
    pkt_count: int
    first_ts: float
    last_ts: float
    src: int = -1
    dst: int = -1

    @property
    def src_addrs(self) -> tuple[str, ...]:
        return (self.key.src_addr,)

    @property
    def dst_addrs(self) -> tuple[str, ...]:
        return (self.key.dst_addr,)

    @property
    def flow_count(self) -> int:
        return 1

    def to_json(self) -> dict:
        return {
            "src": self.src,
            "dst": self.dst,
            "key": list(self.key),
            "len_hist": self.len_hist.to_json(),
            "interval_hist": self.interval_hist.to_json(),
            "proto_hist": self.proto_hist.to_json(),
            "fct": self.fct,
            "pkt_count": self.pkt_count,
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> LongEdge:
        a, b, c, d = obj["key"]
        return cls(
            FlowKey(str(a), str(b), int(c), int(d)),
            Histogram.from_json(obj["len_hist"]),
            Histogram.from_json(obj["interval_hist"]),
            Histogram.from_json(obj["proto_hist"]),
            float(obj["fct"]),
            int(obj["pkt_count"]),
            float(obj["first_ts"]),
            float(obj["last_ts"]),
            int(obj["src"]),
            int(obj["dst"]),
        )


# --------------------------------------------------------------------------- construction


def _short_edge(kind: AggKind, flows: Sequence[FlowRecord], mask: int) -> ShortEdge:
    rep = flows[0]
    srcs = tuple(sorted({f.key.src_addr for f in flows}))
    dsts = tuple(sorted({f.key.dst_addr for f in flows}))
    return ShortEdge(
        kind, rep.masks, rep.lengths, rep.intervals,
        [f.key for f in flows],
        min(f.first_ts for f in flows), max(f.last_ts for f in flows),
        mask, srcs, dsts,
    )


def aggregate_short(flows: Iterable[FlowRecord], agg_line: int = 20) -> list[ShortEdge]:
    """Collapse short flows sharing protocol mask and source/destination into edges.

    Source groups larger than ``agg_line`` are taken first; the remaining flows
    are then grouped by destination; whatever is left becomes one edge per flow.
    """
    if agg_line < 1:
        raise ValueError("agg_line must be >= 1")
    partitions: dict[int, list[FlowRecord]] = {}
    for f in flows:
        partitions.setdefault(f.protocol_mask, []).append(f)
    edges: list[ShortEdge] = []
    for mask, part in partitions.items():
        by_src: dict[str, list[int]] = {}
        for i, f in enumerate(part):
            by_src.setdefault(f.key.src_addr, []).append(i)
        used = np.zeros(len(part), dtype=bool)
        for idx in by_src.values():
            if len(idx) > agg_line:
                group = [part[i] for i in idx]
                unique_dst = len({f.key.dst_addr for f in group}) == 1
                edges.append(_short_edge(AggKind.BOTH_AGG if unique_dst else AggKind.SRC_AGG, group, mask))
                used[idx] = True
        by_dst: dict[str, list[int]] = {}
        for i, f in enumerate(part):
            if not used[i]:
                by_dst.setdefault(f.key.dst_addr, []).append(i)
        for idx in by_dst.values():
            if len(idx) > agg_line:
                group = [part[i] for i in idx]
                unique_src = len({f.key.src_addr for f in group}) == 1
                edges.append(_short_edge(AggKind.BOTH_AGG if unique_src else AggKind.DST_AGG, group, mask))
                used[idx] = True
        for i in np.flatnonzero(~used).tolist():
            edges.append(_short_edge(AggKind.NO_AGG, [part[i]], mask))
    return edges


def fit_long(flow: FlowRecord) -> LongEdge:
    """Histogram the length, interval and protocol sequences of a long flow."""
    return LongEdge(
        flow.key,
        Histogram.from_codes(length_codes(flow.lengths), LEN_BUCKET),
        Histogram.from_codes(interval_codes(flow.intervals), INTERVAL_BUCKET),
        Histogram.from_codes(flow.masks.astype(np.int64), 1),
        float(flow.last_ts - flow.first_ts),
        len(flow),
        float(flow.first_ts),
        float(flow.last_ts),
    )


class InteractionGraph:
    """Vertices are addresses or address groups; edges are short-flow groups or long flows."""

    def __init__(self):
        self.vertices: list[Vertex] = []
        self.short_edges: list[ShortEdge] = []
        self.long_edges: list[LongEdge] = []
        self._by_addrs: dict[tuple[str, ...], int] = {}
        self._in: list[int] = []
        self._out: list[int] = []

    # vertices ---------------------------------------------------------------
    def vertex_for(self, addrs: Sequence[str]) -> int:
        key = tuple(sorted(set(addrs)))
        vid = self._by_addrs.get(key)
        if vid is None:
            vid = len(self.vertices)
            kind = VertexKind.SINGLE if len(key) == 1 else VertexKind.GROUP
            self.vertices.append(Vertex(vid, kind, key))
            self._by_addrs[key] = vid
            self._in.append(0)
            self._out.append(0)
        return vid

    def find_vertex(self, addrs: Sequence[str]) -> Optional[int]:
        return self._by_addrs.get(tuple(sorted(set(addrs))))

    def in_degree(self, v: int) -> int:
        return self._in[v]

    def out_degree(self, v: int) -> int:
        return self._out[v]

    def degree_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self._in, dtype=np.int64), np.asarray(self._out, dtype=np.int64)

    def recount_degrees(self) -> tuple[list[int], list[int]]:
        """Brute-force in/out degrees from the edge lists."""
        ins = [0] * len(self.vertices)
        outs = [0] * len(self.vertices)
        for e in [*self.short_edges, *self.long_edges]:
            outs[e.src] += 1
            ins[e.dst] += 1
        return ins, outs

    # edges ------------------------------------------------------------------
    def _attach(self, edge) -> None:
        edge.src = self.vertex_for(edge.src_addrs)
        edge.dst = self.vertex_for(edge.dst_addrs)
        self._out[edge.src] += 1
        self._in[edge.dst] += 1

    def add_edges(self, short_edges: Iterable[ShortEdge] = (), long_edges: Iterable[LongEdge] = ()) -> None:
        for e in short_edges:
            self._attach(e)
            self.short_edges.append(e)
        for e in long_edges:
            self._attach(e)
            self.long_edges.append(e)

    @property
    def n_edges(self) -> int:
        return len(self.short_edges) + len(self.long_edges)

    # serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": GRAPH_VERSION,
            "vertices": [{"id": v.id, "kind": v.kind.value, "addrs": list(v.addrs)} for v in self.vertices],
            "short_edges": [e.to_json() for e in self.short_edges],
            "long_edges": [e.to_json() for e in self.long_edges],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> InteractionGraph:
        if not isinstance(obj, dict) or "version" not in obj:
            raise GraphFormatError("missing version field")
        if obj["version"] != GRAPH_VERSION:
            raise GraphVersionError(f"graph format version {obj['version']!r}, expected {GRAPH_VERSION}")
        g = cls()
        try:
            for i, v in enumerate(obj["vertices"]):
                if int(v["id"]) != i:
                    raise GraphFormatError(f"vertex ids must be dense, got {v['id']} at {i}")
                addrs = tuple(str(a) for a in v["addrs"])
                g.vertices.append(Vertex(i, VertexKind(v["kind"]), addrs))
                g._by_addrs[addrs] = i
                g._in.append(0)
                g._out.append(0)
            lookup = {v.id: v for v in g.vertices}
            shorts = [ShortEdge.from_json(e, lookup) for e in obj["short_edges"]]
            longs = [LongEdge.from_json(e) for e in obj["long_edges"]]
        except GraphFormatError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise GraphFormatError(f"corrupt graph: {exc!r}") from exc
        for e in [*shorts, *longs]:
            if not (0 <= e.src < len(g.vertices) and 0 <= e.dst < len(g.vertices)):
                raise GraphFormatError("edge endpoint refers to a missing vertex")
            g._out[e.src] += 1
            g._in[e.dst] += 1
        g.short_edges, g.long_edges = shorts, longs
        return g

    def export(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> InteractionGraph:
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{path}: corrupt graph file ({exc})") from exc
        return cls.from_dict(obj)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return (f"InteractionGraph(vertices={len(self.vertices)}, short_edges={len(self.short_edges)}, "
                f"long_edges={len(self.long_edges)})")


def export_graph(graph: InteractionGraph, path: str | Path) -> None:
    graph.export(path)


def import_graph(path: str | Path) -> InteractionGraph:
    return InteractionGraph.load(path)


def add_edges(graph: InteractionGraph, short_edges: Iterable[ShortEdge], long_edges: Iterable[LongEdge]) -> None:
    graph.add_edges(short_edges, long_edges)


def build_graph(short_flows: Iterable[FlowRecord], long_flows: Iterable[FlowRecord], agg_line: int = 20
                ) -> InteractionGraph:
    g = InteractionGraph()
    g.add_edges(aggregate_short(short_flows, agg_line), [fit_long(f) for f in long_flows])
    return g


def diff(a: InteractionGraph, b: InteractionGraph, limit: int = 20) -> list[str]:
    """Human-readable structural differences, empty when the graphs are equal."""
    da, db = a.to_dict(), b.to_dict()
    out: list[str] = []
    for section in ("vertices", "short_edges", "long_edges"):
        xa, xb = da[section], db[section]
        if len(xa) != len(xb):
            out.append(f"{section}: {len(xa)} vs {len(xb)} entries")
        for i, (p, q) in enumerate(zip(xa, xb)):
            if p != q:
                keys = sorted(k for k in set(p) | set(q) if p.get(k) != q.get(k))
                out.append(f"{section}[{i}]: fields differ: {', '.join(keys)}")
                if len(out) >= limit:
                    return out
    return out


def degree_summary(graph: InteractionGraph) -> Counter:
    """Count of edges per aggregation kind, for reports."""
    c = Counter(e.agg_kind.value for e in graph.short_edges)
    c["Long"] = len(graph.long_edges)
    return c
