"""Command-line front end.

Exit codes: 0 success, 1 failed check or graphs differ, 2 input error,
3 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from flowvision.config import Config, ConfigError, load_config

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3

log = logging.getLogger("flowvision")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("pcap", "csv"), help="input format (default: by file suffix)")
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="random seed for clustering")
    p.add_argument("--window", type=float, help="analysis window in seconds of trace time")


def build_parser() -> _Parser:
    ap = _Parser(prog="flowvision", description="Flow-interaction-graph traffic detection.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("detect", help="run detection on a trace")
    d.add_argument("input")
    _common(d)
    d.add_argument("--out", default="-", help="verdict JSON Lines path ('-' for stdout)")
    d.add_argument("--report", help="run report JSON path (default: <out>.report.json)")
    d.add_argument("--summary", help="per-window summary CSV (default: <out>.summary.csv)")

    g = sub.add_parser("graph", help="build and export interaction graphs; 'graph diff A B' compares two")
    g.add_argument("input")
    _common(g)
    g.add_argument("--out", required=True, help="graph JSON path")

    e = sub.add_parser("entropy", help="evaluate the recording entropy model")
    e.add_argument("--preset", help="named (s, e_count, K, C) bundle")
    e.add_argument("--s", type=int, default=8)
    e.add_argument("--e-count", type=float, default=40.0)
    e.add_argument("--k", type=int, default=15, help="short/long threshold K")
    e.add_argument("--c", type=float, default=1.5, help="average flows per aggregated edge C")
    e.add_argument("--p", type=float)
    e.add_argument("--q", type=float)
    e.add_argument("--grid", type=int, default=32, help="grid resolution (p points = grid + 1)")
    e.add_argument("--out", default="-")
    e.add_argument("--check-dpi", action="store_true", help="assert H_ideal >= H_graph on the grid")
    e.add_argument("--integrate", action="store_true", help="integrate the four densities over the region")
    e.add_argument("--no-region-check", action="store_true")

    s = sub.add_parser("synth", help="generate a synthetic labeled trace")
    s.add_argument("scenario", nargs="?")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="trace path")
    s.add_argument("--sidecar", help="ground-truth CSV (default: <out>.labels.csv)")
    s.add_argument("--format", choices=("pcap", "csv"), default="csv")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--duration", type=float, default=40.0)
    s.add_argument("--list", action="store_true", help="print scenario names")
    return ap


def _diff_parser() -> _Parser:
    p = _Parser(prog="flowvision graph diff", description="compare two exported graphs")
    p.add_argument("a")
    p.add_argument("b")
    return p


def _config(args) -> Config:
    cfg = load_config(args.config)
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "window", None) is not None:
        kw["window"] = args.window
    return cfg.with_overrides(**kw) if kw else cfg


def _load(args):
    from flowvision.ingest import load_trace

    return load_trace(args.input, args.format)


def _open_out(path: str):
    if path == "-":
        return sys.stdout, False
    return open(path, "w"), True


def cmd_detect(args) -> int:
    from flowvision.pipeline import run

    cfg = _config(args)
    batch = _load(args)
    out, close = _open_out(args.out)
    rows = []
    try:
        def emit(res):
            for v in res.verdicts:
                obj = v.to_json(res.graph)
                obj["window"] = res.index
                out.write(json.dumps(obj, sort_keys=True) + "\n")
            rows.append(res)

        _, report = run(batch, cfg, on_window=emit)
    finally:
        if close:
            out.close()
    report.input = {"path": str(args.input), "format": args.format or "auto"}
    base = None if args.out == "-" else args.out
    report_path = args.report or (f"{base}.report.json" if base else None)
    summary_path = args.summary or (f"{base}.summary.csv" if base else None)
    if report_path:
        Path(report_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if summary_path:
        with open(summary_path, "w", newline="") as fh:
            fields = ["window", "short_flows", "long_flows", "vertices", "short_edges", "long_edges", "components",
                      "abnormal_components", "edges", "malicious_edges", "malicious_flows"]
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for row in report.windows:
                w.writerow(row)
    total = sum(r["malicious_edges"] for r in report.windows)
    log.info("%d packets, %d windows, %d malicious edges", report.packets, len(report.windows), total)
    return EXIT_OK


def cmd_graph(args) -> int:
    from flowvision.pipeline import build_window_graphs

    cfg = _config(args)
    batch = _load(args)
    graphs = build_window_graphs(batch, cfg)
    out = Path(args.out)
    if len(graphs) == 1:
        graphs[0][1].export(out)
    else:
        for w, g in graphs:
            g.export(out.with_name(f"{out.stem}.{w}{out.suffix}"))
    return EXIT_OK


def cmd_graph_diff(argv: Sequence[str]) -> int:
    from flowvision.graph import diff, import_graph

    args = _diff_parser().parse_args(argv)
    a, b = import_graph(args.a), import_graph(args.b)
    delta = diff(a, b)
    for line in delta:
        print(line)
    return EXIT_OK if not delta else EXIT_CHECK


def cmd_entropy(args) -> int:
    from flowvision import entropy as en

    region = not args.no_region_check
    try:
        if args.preset:
            if args.preset not in en.PRESETS:
                raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(en.PRESETS)}")
            base = en.PRESETS[args.preset]
            from dataclasses import replace
            base = replace(base, region_check=region)
        else:
            base = en.DtmcParams(args.s, args.e_count, 0.5, 0.7, args.k, args.c, region)
        if args.p is not None or args.q is not None:
            base = base.at(args.p if args.p is not None else base.p, args.q if args.q is not None else base.q)
    except en.EntropyDomainError as exc:
        raise ConfigError(str(exc)) from exc

    out, close = _open_out(args.out)
    status = EXIT_OK
    try:
        w = csv.writer(out, lineterminator="\n")
        if args.integrate:
            vals = {m: en.integrate_density(m, base, max(32, args.grid)) for m in en.MODES}
            w.writerow(["integral_ideal", "integral_hv", "integral_samp", "integral_eve"])
            w.writerow([repr(vals["ideal"]), repr(vals["hypervision"]), repr(vals["sampling"]), repr(vals["event"])])
            if not all(vals["hypervision"] > vals[m] for m in ("ideal", "sampling", "event")):
                log.error("density integral ordering violated: %s", vals)
                status = EXIT_CHECK
        elif args.check_dpi:
            gaps = en.dpi_gaps(base, args.grid)
            w.writerow(["min_gap", "max_gap", "points"])
            w.writerow([repr(float(gaps.min())), repr(float(gaps.max())), gaps.size])
            if gaps.min() < -1e-9:
                status = EXIT_CHECK
        else:
            if args.p is not None or args.q is not None:
                points = [(base.p, base.q)]
            else:
                ps, qs = en.region_grid(args.grid)
                points = [(float(p), float(q)) for p in ps for q in qs]
            cols = ["ideal", "hv", "samp", "eve"]
            w.writerow(["p", "q", *[f"h_{c}" for c in cols], *[f"l_{c}" for c in cols], *[f"d_{c}" for c in cols]])
            for p, q in points:
                par = base.at(p, q)
                ms = [en.MODE_FUNCS[m](par) for m in en.MODES]
                w.writerow([repr(p), repr(q), *[repr(m.h) for m in ms], *[repr(m.l) for m in ms],
                            *[repr(m.d) for m in ms]])
    finally:
        if close:
            out.close()
    return status


def cmd_synth(args) -> int:
    from flowvision.ingest import write_pcap
    from flowvision.synth import SCENARIOS, gen_synthetic, write_sidecar

    if args.list:
        for name in SCENARIOS:
            print(name)
        return EXIT_OK
    if not args.scenario:
        raise UsageError("scenario required (see --list)")
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    if not args.out:
        raise UsageError("--out is required")
    trace = gen_synthetic(args.scenario, args.seed, scale=args.scale, duration=args.duration)
    if args.format == "pcap":
        write_pcap(trace.batch.records(), args.out)
    else:
        trace.write(args.out)
    write_sidecar(trace.labels, args.sidecar or f"{args.out}.labels.csv")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    from flowvision.graph import GraphFormatError
    from flowvision.ingest import TraceFormatError

    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("FV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        if len(argv) >= 2 and argv[0] == "graph" and argv[1] == "diff":
            return cmd_graph_diff(argv[2:])
        args = build_parser().parse_args(argv)
        handler = {"detect": cmd_detect, "graph": cmd_graph, "entropy": cmd_entropy, "synth": cmd_synth}
        return handler[args.command](args)
    except UsageError as exc:
        print(f"flowvision: usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"flowvision: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError, TraceFormatError, GraphFormatError) as exc:
        print(f"flowvision: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"flowvision: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
