"""Flow hash table with timeout-based completion and short/long classification.

Two drivers share one set of semantics:

* ``FlowTable`` + ``classify_stream`` process one ``PacketRecord`` at a time.
* ``BatchFlowTable`` processes columnar ``PacketBatch`` chunks with numpy and
  emits the same sweeps, in the same order, with the same flow records.

The clock is the running maximum of trace timestamps.  After each packet the
driver sweeps when ``clock - last_check > judge_interval``; a sweep evicts every
flow whose most recently appended packet satisfies
``time_now - last.time > pkt_timeout``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np

from flowvision.ingest import L4, PacketBatch, PacketRecord, PerPacketFeature, protocol_mask


class FlowKey(NamedTuple):
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int


class FlowClass(Enum):
    SHORT = "short"
    LONG = "long"


@dataclass(eq=False)
class FlowRecord:
    """A completed flow: per-packet feature columns plus timing."""

    key: FlowKey
    masks: np.ndarray
    lengths: np.ndarray
    intervals: np.ndarray
    first_ts: float
    last_ts: float
    l4_protocol: L4

    def __len__(self) -> int:
        return int(self.masks.shape[0])

    @property
    def features(self) -> list[PerPacketFeature]:
        return [PerPacketFeature(int(m), int(n), float(i))
                for m, n, i in zip(self.masks, self.lengths, self.intervals)]

    @property
    def protocol_mask(self) -> int:
        return int(np.bitwise_or.reduce(self.masks)) if len(self) else 0

    @classmethod
    def from_features(cls, key: FlowKey, features: Iterable[PerPacketFeature], first_ts: float,
                      last_ts: float, l4_protocol: L4) -> FlowRecord:
        feats = list(features)
        return cls(
            key,
            np.asarray([f.protocol_mask for f in feats], dtype=np.uint16),
            np.asarray([f.length for f in feats], dtype=np.int64),
            np.asarray([f.interval for f in feats], dtype=np.float64),
            float(first_ts), float(last_ts), L4(l4_protocol),
        )

    def signature(self) -> tuple:
        """Hashable identity used for multiset comparisons."""
        return (self.key, self.masks.tolist(), self.lengths.tolist(), self.intervals.tolist(),
                self.first_ts, self.last_ts, int(self.l4_protocol))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlowRecord):
            return NotImplemented
        return self.signature() == other.signature()

    def __repr__(self) -> str:
        return (f"FlowRecord({self.key}, n={len(self)}, first_ts={self.first_ts}, "
                f"last_ts={self.last_ts}, {L4(self.l4_protocol).name})")


@dataclass(frozen=True)
class FlowTableConfig:
    judge_interval: float = 1.0
    pkt_timeout: float = 10.0
    flow_line: int = 15

    def __post_init__(self):
        for name in ("judge_interval", "pkt_timeout", "flow_line"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be strictly positive, got {v!r}")


def classify(flow: FlowRecord, flow_line: int) -> FlowClass:
    return FlowClass.LONG if len(flow) > flow_line else FlowClass.SHORT


def _split(flows: Iterable[FlowRecord], flow_line: int) -> tuple[list[FlowRecord], list[FlowRecord]]:
    short, long_ = [], []
    for f in flows:
        (long_ if len(f) > flow_line else short).append(f)
    return short, long_


class SweepResult(NamedTuple):
    time: float
    short: list
    long: list
    final: bool = False


# --------------------------------------------------------------------------- per-packet table


class _Entry:
    __slots__ = ("masks", "lengths", "intervals", "first_ts", "last_ts", "last_time", "proto")

    def __init__(self, pkt: PacketRecord):
        self.masks = [protocol_mask(pkt.l4_protocol, pkt.tcp_flags)]
        self.lengths = [pkt.length]
        self.intervals = [0.0]
        self.first_ts = self.last_ts = self.last_time = pkt.timestamp
        self.proto = L4(pkt.l4_protocol)

    def append(self, pkt: PacketRecord) -> None:
        self.masks.append(protocol_mask(pkt.l4_protocol, pkt.tcp_flags))
        self.lengths.append(pkt.length)
        self.intervals.append(max(0.0, pkt.timestamp - self.last_time))
        self.first_ts = min(self.first_ts, pkt.timestamp)
        self.last_ts = max(self.last_ts, pkt.timestamp)
        self.last_time = pkt.timestamp

    def record(self, key: FlowKey) -> FlowRecord:
        return FlowRecord(key, np.asarray(self.masks, dtype=np.uint16), np.asarray(self.lengths, dtype=np.int64),
                          np.asarray(self.intervals, dtype=np.float64), self.first_ts, self.last_ts, self.proto)


class FlowTable:
    """Keyed flow table; entries are kept in creation order."""

    def __init__(self, config: Optional[FlowTableConfig] = None):
        self.config = config or FlowTableConfig()
        self.clock = -math.inf
        self._entries: dict[FlowKey, _Entry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._entries

    def insert_packet(self, pkt: PacketRecord) -> None:
        key = FlowKey(pkt.src_addr, pkt.dst_addr, pkt.src_port, pkt.dst_port)
        entry = self._entries.get(key)
        if entry is None:
            self._entries[key] = _Entry(pkt)
        else:
            entry.append(pkt)
        if pkt.timestamp > self.clock:
            self.clock = pkt.timestamp

    def sweep(self, time_now: float) -> tuple[list[FlowRecord], list[FlowRecord]]:
        timeout = self.config.pkt_timeout
        done = [k for k, e in self._entries.items() if time_now - e.last_time > timeout]
        return _split((self._entries.pop(k).record(k) for k in done), self.config.flow_line)

    def flush(self) -> tuple[list[FlowRecord], list[FlowRecord]]:
        entries, self._entries = self._entries, {}
        return _split((e.record(k) for k, e in entries.items()), self.config.flow_line)


def insert_packet(table: FlowTable, pkt: PacketRecord) -> None:
    table.insert_packet(pkt)


def sweep(table: FlowTable, time_now: float) -> tuple[list[FlowRecord], list[FlowRecord]]:
    return table.sweep(time_now)


def flush(table: FlowTable) -> tuple[list[FlowRecord], list[FlowRecord]]:
    return table.flush()


def classify_stream(packets: Iterable[PacketRecord], config: Optional[FlowTableConfig] = None
                    ) -> Iterator[SweepResult]:
    """Drive a ``FlowTable`` over a packet stream, yielding every sweep and a final flush."""
    table = FlowTable(config)
    judge = table.config.judge_interval
    last_check = None
    for pkt in packets:
        table.insert_packet(pkt)
        if last_check is None:
            last_check = table.clock
        if table.clock - last_check > judge:
            short, long_ = table.sweep(table.clock)
            yield SweepResult(table.clock, short, long_)
            last_check = table.clock
    short, long_ = table.flush()
    yield SweepResult(table.clock if last_check is not None else 0.0, short, long_, True)


# --------------------------------------------------------------------------- columnar table


def _first_exceeding(arr: np.ndarray, base: float, thr: float) -> int:
    """First index j with ``arr[j] - base > thr`` for nondecreasing ``arr``."""
    n = arr.shape[0]
    j = int(np.searchsorted(arr, base + thr, side="right"))
    while j > 0 and arr[j - 1] - base > thr:
        j -= 1
    while j < n and not (arr[j] - base > thr):
        j += 1
    return j


def _first_sweep_after(T: np.ndarray, t_last: np.ndarray, timeout: float) -> np.ndarray:
    """Vectorized: first sweep index s with ``T[s] - t_last > timeout``."""
    S = T.shape[0]
    if S == 0:
        return np.zeros(t_last.shape[0], dtype=np.int64)
    s = np.searchsorted(T, t_last + timeout, side="right")
    while True:
        back = (s > 0) & (T[np.maximum(s - 1, 0)] - t_last > timeout)
        if not back.any():
            break
        s = s - back
    while True:
        fwd = (s < S) & ~(T[np.minimum(s, S - 1)] - t_last > timeout)
        if not fwd.any():
            break
        s = s + fwd
    return s


@dataclass
class _Pending:
    """Packets of flows still open at the end of a chunk."""

    pos: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    ts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    src: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    dst: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    sport: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    dport: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    proto: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    mask: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    length: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))

    COLS = ("pos", "ts", "src", "dst", "sport", "dport", "proto", "mask", "length")

    def __len__(self):
        return int(self.pos.shape[0])


class BatchFlowTable:
    """Columnar equivalent of ``classify_stream``.

    Feed consecutive chunks of one trace with ``feed``; call ``finish`` for the
    final flush.  All chunks must share the address table of the first one (the
    chunks of one ``PacketBatch`` do).
    """

    def __init__(self, config: Optional[FlowTableConfig] = None):
        self.config = config or FlowTableConfig()
        self.clock: Optional[float] = None
        self.last_check: Optional[float] = None
        self.addrs: Optional[list[str]] = None
        self._offset = 0
        self._pending = _Pending()

    def __len__(self) -> int:
        """Number of open flows."""
        p = self._pending
        if not len(p):
            return 0
        k1 = (p.src.astype(np.int64) << 32) | p.dst.astype(np.int64)
        k2 = (p.sport.astype(np.int64) << 16) | p.dport.astype(np.int64)
        return int(np.unique(np.stack([k1, k2], axis=1), axis=0).shape[0])

    def feed(self, batch: PacketBatch) -> list[SweepResult]:
        n = len(batch)
        if n == 0:
            return []
        if self.addrs is None:
            self.addrs = batch.addrs
        elif batch.addrs is not self.addrs and batch.addrs[:len(self.addrs)] != self.addrs:
            raise ValueError("all chunks must share one address table")
        else:
            self.addrs = batch.addrs
        cfg = self.config
        ts = batch.ts.astype(np.float64, copy=False)
        if self.clock is None:
            self.clock = float(ts[0])
            self.last_check = float(ts[0])
        clock = np.maximum.accumulate(np.concatenate([[self.clock], ts]))[1:]

        # Sweep positions: packet index after which a sweep runs, and its time.
        iters: list[int] = []
        lc = self.last_check
        start = 0
        while True:
            j = start + _first_exceeding(clock[start:], lc, cfg.judge_interval)
            if j >= n:
                break
            iters.append(j)
            lc = float(clock[j])
            start = j + 1
        self.clock = float(clock[-1])
        self.last_check = lc
        p = self._pending
        m = len(p)
        sweep_iter = np.asarray(iters, dtype=np.int64) + m  # positions in the combined arrays
        T = clock[np.asarray(iters, dtype=np.int64)] if iters else np.zeros(0)

        pos = np.concatenate([p.pos, self._offset + np.arange(n, dtype=np.int64)])
        self._offset += n
        cols = {
            "ts": np.concatenate([p.ts, ts]),
            "src": np.concatenate([p.src, batch.src.astype(np.int32)]),
            "dst": np.concatenate([p.dst, batch.dst.astype(np.int32)]),
            "sport": np.concatenate([p.sport, batch.sport.astype(np.int32)]),
            "dport": np.concatenate([p.dport, batch.dport.astype(np.int32)]),
            "proto": np.concatenate([p.proto, batch.proto.astype(np.int8)]),
            "mask": np.concatenate([p.mask, batch.masks()]),
            "length": np.concatenate([p.length, batch.length.astype(np.int32)]),
        }
        return self._segment(pos, cols, sweep_iter, T, final=False)

    def finish(self) -> SweepResult:
        p = self._pending
        sweeps = self._segment(p.pos, {c: getattr(p, c) for c in _Pending.COLS if c != "pos"},
                               np.zeros(0, np.int64), np.zeros(0), final=True)
        return sweeps[0]

    def _segment(self, pos, cols, sweep_iter, T, final: bool) -> list[SweepResult]:
        cfg = self.config
        N = pos.shape[0]
        S = T.shape[0]
        if N == 0:
            self._pending = _Pending()
            if final:
                return [SweepResult(self.clock if self.clock is not None else 0.0, [], [], True)]
            return [SweepResult(float(t), [], [], False) for t in T]
        k1 = (cols["src"].astype(np.int64) << 32) | cols["dst"].astype(np.int64)
        k2 = (cols["sport"].astype(np.int64) << 16) | cols["dport"].astype(np.int64)
        order = np.lexsort((np.arange(N), k2, k1))
        ts_o = cols["ts"][order]
        same = np.zeros(N, dtype=bool)
        if N > 1:
            same[1:] = (k1[order][1:] == k1[order][:-1]) & (k2[order][1:] == k2[order][:-1])
        a = order[:-1]
        b = order[1:]
        # Pair (a, b) of consecutive same-key packets splits iff the last sweep
        # before b ran after a and found a's flow expired.
        split = np.zeros(N, dtype=bool)
        if S and N > 1:
            s = np.searchsorted(sweep_iter, b - 1, side="right") - 1
            sc = np.maximum(s, 0)
            split[1:] = (s >= 0) & (sweep_iter[sc] >= a) & (T[sc] - ts_o[:-1] > cfg.pkt_timeout)
        starts_mask = ~same | split
        starts = np.flatnonzero(starts_mask)
        ends = np.append(starts[1:], N) - 1
        last_row = order[ends]
        if final:
            evict = np.zeros(starts.shape[0], dtype=np.int64)
            S_eff = 1
        else:
            s_iter = np.searchsorted(sweep_iter, last_row, side="left")
            s_time = _first_sweep_after(T, ts_o[ends], cfg.pkt_timeout)
            evict = np.maximum(s_iter, s_time)
            S_eff = S

        # Per-packet derived columns in segment order.
        interval = np.zeros(N)
        if N > 1:
            interval[1:] = np.maximum(0.0, ts_o[1:] - ts_o[:-1])
        interval[starts] = 0.0
        mask_o = cols["mask"][order]
        len_o = cols["length"][order].astype(np.int64)
        counts = ends - starts + 1
        first_ts = np.minimum.reduceat(ts_o, starts) if N else np.zeros(0)
        last_ts = np.maximum.reduceat(ts_o, starts) if N else np.zeros(0)
        creation = pos[order[starts]]

        closed = evict < S_eff
        # Carry open flows to the next chunk.
        if not final:
            seg_of_row = np.repeat(np.arange(starts.shape[0]), counts)
            keep_rows = np.sort(order[~closed[seg_of_row]])
            self._pending = _Pending(pos[keep_rows], *(cols[c][keep_rows] for c in _Pending.COLS[1:]))
        else:
            self._pending = _Pending()

        addrs = self.addrs or []
        src_o, dst_o = cols["src"][order], cols["dst"][order]
        sp_o, dp_o, pr_o = cols["sport"][order], cols["dport"][order], cols["proto"][order]
        protos = list(L4)
        results: list[SweepResult] = []
        idx = np.flatnonzero(closed)
        idx = idx[np.lexsort((creation[idx], evict[idx]))]
        bounds = np.searchsorted(evict[idx], np.arange(S_eff + 1), side="left")
        flow_line = cfg.flow_line
        for s in range(S_eff):
            short, long_ = [], []
            for i in idx[bounds[s]:bounds[s + 1]].tolist():
                lo, hi = int(starts[i]), int(ends[i]) + 1
                rec = FlowRecord(
                    FlowKey(addrs[src_o[lo]], addrs[dst_o[lo]], int(sp_o[lo]), int(dp_o[lo])),
                    mask_o[lo:hi], len_o[lo:hi], interval[lo:hi],
                    float(first_ts[i]), float(last_ts[i]), protos[pr_o[lo]],
                )
                (long_ if counts[i] > flow_line else short).append(rec)
            t = float(T[s]) if not final else (self.clock if self.clock is not None else 0.0)
            results.append(SweepResult(t, short, long_, final))
        return results


def classify_batch(batch: PacketBatch, config: Optional[FlowTableConfig] = None,
                   chunk: int = 1 << 20) -> list[SweepResult]:
    """All sweeps of a trace followed by the final flush (columnar path)."""
    table = BatchFlowTable(config)
    out: list[SweepResult] = []
    for part in batch.chunks(chunk):
        out.extend(table.feed(part))
    out.append(table.finish())
    return out
