"""Windowed end-to-end run: packets -> flows -> graph -> verdicts, with a run report."""

from __future__ import annotations

import math
import resource
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional

from flowvision.config import Config
from flowvision.detect import DetectionVerdict, DetectStats, detect
from flowvision.flowtable import BatchFlowTable, FlowRecord, FlowTableConfig, SweepResult
from flowvision.graph import InteractionGraph, build_graph
from flowvision.ingest import PacketBatch

CHUNK = 1 << 20


@dataclass
class WindowResult:
    index: int
    graph: InteractionGraph
    verdicts: list[DetectionVerdict]
    n_short_flows: int
    n_long_flows: int
    stats: DetectStats

    @property
    def n_malicious(self) -> int:
        return sum(v.malicious for v in self.verdicts)


@dataclass
class RunReport:
    packets: int = 0
    windows: list[dict] = field(default_factory=list)
    stages: dict[str, float] = field(default_factory=lambda: {
        "flow_classification": 0.0, "graph_construction": 0.0, "preprocessing": 0.0, "detection": 0.0})
    wall_seconds: float = 0.0
    peak_memory_bytes: int = 0
    config: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    input: dict = field(default_factory=dict)

    @property
    def packets_per_second(self) -> float:
        return self.packets / self.wall_seconds if self.wall_seconds > 0 else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["packets_per_second"] = self.packets_per_second
        return d


def _peak_rss() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def flow_config(cfg: Config) -> FlowTableConfig:
    return FlowTableConfig(cfg.judge_interval, cfg.pkt_timeout, cfg.flow_line)


def windowed_sweeps(batch: PacketBatch, cfg: Config, report: Optional[RunReport] = None
                    ) -> Iterator[tuple[int, list[FlowRecord], list[FlowRecord]]]:
    """Group evicted flows by analysis window (window of the sweep that evicted them).

    The final flush belongs to the last window.  Windows with no flows are skipped.
    """
    table = BatchFlowTable(flow_config(cfg))
    t0: Optional[float] = float(batch.ts[0]) if len(batch) else None
    cur, short, long_ = None, [], []

    def index(t: float) -> int:
        return max(0, int(math.floor((t - t0) / cfg.window))) if t0 is not None else 0

    def absorb(results: list[SweepResult]):
        nonlocal cur, short, long_
        for r in results:
            if not r.short and not r.long:
                continue
            w = index(r.time)
            if cur is not None and w != cur:
                yield cur, short, long_
                short, long_ = [], []
            cur = w
            short.extend(r.short)
            long_.extend(r.long)

    for part in batch.chunks(CHUNK):
        t = time.perf_counter()
        results = table.feed(part)
        if report is not None:
            report.stages["flow_classification"] += time.perf_counter() - t
        yield from absorb(results)
    t = time.perf_counter()
    final = table.finish()
    if report is not None:
        report.stages["flow_classification"] += time.perf_counter() - t
    yield from absorb([final])
    if cur is not None:
        yield cur, short, long_


def run(batch: PacketBatch, cfg: Config = Config(),
        on_window: Optional[Callable[[WindowResult], None]] = None) -> tuple[list[WindowResult], RunReport]:
    """Process a trace window by window.

    When ``on_window`` is given each result is handed over and not retained,
    keeping memory bounded on long traces.
    """
    report = RunReport(packets=len(batch), config=cfg.snapshot(), overrides=cfg.overrides())
    start = time.perf_counter()
    kept: list[WindowResult] = []
    for w, short, long_ in windowed_sweeps(batch, cfg, report):
        t = time.perf_counter()
        graph = build_graph(short, long_, cfg.agg_line)
        report.stages["graph_construction"] += time.perf_counter() - t
        stats = DetectStats()
        verdicts = detect(graph, cfg, stats)
        report.stages["preprocessing"] += stats.preprocess_s
        report.stages["detection"] += stats.detect_s
        res = WindowResult(w, graph, verdicts, len(short), len(long_), stats)
        report.windows.append({
            "window": w,
            "short_flows": len(short),
            "long_flows": len(long_),
            "vertices": len(graph.vertices),
            "short_edges": len(graph.short_edges),
            "long_edges": len(graph.long_edges),
            "components": stats.n_components,
            "abnormal_components": stats.n_abnormal,
            "edges": len(verdicts),
            "malicious_edges": res.n_malicious,
            "malicious_flows": sum(v.flow_count for v in verdicts if v.malicious),
        })
        if on_window is not None:
            on_window(res)
        else:
            kept.append(res)
    report.wall_seconds = time.perf_counter() - start
    report.peak_memory_bytes = _peak_rss()
    return kept, report


def build_window_graphs(batch: PacketBatch, cfg: Config = Config()) -> list[tuple[int, InteractionGraph]]:
    out = [(w, build_graph(s, l, cfg.agg_line)) for w, s, l in windowed_sweeps(batch, cfg)]
    return out or [(0, InteractionGraph())]
