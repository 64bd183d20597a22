"""Command line: ``nestsim run | sweep | validate | summarize``."""

from __future__ import annotations

import argparse
import glob
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .oracle import validate_files
from .runner import load_manifest, run_manifest
from .traceio import TraceFormatError, parse_intervals, read_decisions, read_json, read_metrics, summarize_logs

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_ERROR = 2


def _fmt(mean, std, scale, digits):
    if mean is None:
        return "-"
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"


def format_table(rows_by_session: list[tuple[str, list[dict]]]) -> str:
    header = ("session", "interval (s)", "VF-RTT (ms)", "FDR (fps)", "PL (pkts)", "BR (Mbps)")
    lines = [header]
    for name, rows in rows_by_session:
        for r in rows:
            lines.append((name, f"{r['start_s']:g}-{r['end_s']:g}",
                          _fmt(r["vf_rtt_mean_s"], r["vf_rtt_std_s"], 1e3, 2),
                          _fmt(r["fdr_mean_fps"], r["fdr_std_fps"], 1, 2),
                          str(r["packets_lost"]),
                          _fmt(r["bitrate_mean_bps"], r["bitrate_std_bps"], 1e-6, 2)))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines)


def _session_dirs(results: Path) -> list[Path]:
    if (results / "metrics.jsonl").exists():
        return [results]
    dirs = sorted(p.parent for p in results.glob("*/metrics.jsonl"))
    if not dirs:
        raise FileNotFoundError(f"no metrics.jsonl under {results}")
    return dirs


def summarize_dir(results, intervals=None) -> list[tuple[str, list[dict]]]:
    out = []
    for d in _session_dirs(Path(results)):
        log = read_metrics(d / "metrics.jsonl")
        _, decisions = read_decisions(d / "decisions.jsonl")
        ivs = intervals
        if ivs is None:
            summary = d / "summary.json"
            if summary.exists():
                ivs = [(r["start_s"], r["end_s"]) for r in read_json(summary)["intervals"]]
            else:
                end = max([dd["time_s"] for dd in decisions] or [0.0])
                ivs = [(0.0, end)]
        name = read_json(d / "summary.json").get("session", d.name) if (d / "summary.json").exists() else d.name
        out.append((name, summarize_logs(log, decisions, ivs)))
    return out


def cmd_run(args) -> int:
    output = run_manifest(args.manifest, args.out)
    print(f"results: {output.directory}")
    print(format_table([(s["session"], s["intervals"]) for s in output.summaries]))
    return EXIT_OK


def _run_one(path_and_out):
    path, out = path_and_out
    output = run_manifest(path, out)
    return str(output.directory)


def cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.pattern))
    if not paths:
        print(f"nestsim: error: no manifests match {args.pattern!r}", file=sys.stderr)
        return EXIT_ERROR
    for p in paths:  # fail fast on schema errors before running anything
        load_manifest(p)
    jobs = [(p, args.out) for p in paths]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            dirs = list(pool.map(_run_one, jobs))
    else:
        dirs = [_run_one(j) for j in jobs]
    for p, d in zip(paths, dirs):
        print(f"{p} -> {d}")
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate_files(args.trace, args.metrics, args.feedback, args.tolerance)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.format())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_summarize(args) -> int:
    intervals = parse_intervals(args.intervals) if args.intervals else None
    table = summarize_dir(args.results, intervals)
    if args.json:
        print(json.dumps([{"session": name, "intervals": rows} for name, rows in table], indent=2))
    else:
        print(format_table(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestsim", description="VR streaming ABR simulator")
    parser.add_argument("--version", action="version", version=f"nestsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="results root (default: $NESTSIM_OUTPUT_DIR or ./results)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every manifest matching a glob")
    p.add_argument("pattern")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="recompute metrics from a trace and compare with a metric log")
    p.add_argument("trace")
    p.add_argument("metrics")
    p.add_argument("--feedback", help="stats feedback CSV (default: feedback.csv next to the trace)")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("summarize", help="per-interval VF-RTT, FDR, PL and BR table")
    p.add_argument("results")
    p.add_argument("--intervals", help="e.g. 20-40,60-80,100-120 (seconds)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, TraceFormatError) as exc:
        print(f"nestsim: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
