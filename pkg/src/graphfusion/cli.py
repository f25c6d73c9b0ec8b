"""Command line entry point: ``graphfusion simulate | run | report | bench``.

Exit status is 0 when every acceptance threshold in the scenario passes
(``simulate`` always exits 0 on success), 1 on a failed threshold or run
failure and 2 on bad input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_config
from .evaluation import RunReport, run_scenario
from .simulator import LogParseError, generate, load_scenario, write_log


def _summary(report: RunReport) -> str:
    lines = [f"scenario {report.scenario} ({report.mode})"]
    if report.failure:
        lines.append(f"  FAILURE: {report.failure}")
    for name in ("rpe", "consistency", "truth_error", "latency"):
        m = getattr(report, name)
        if m:
            lines.append("  " + name + ": " + ", ".join(f"{k}={v:.6g}" for k, v in m.items()))
        elif name == "latency":
            lines.append("  latency: not applicable (deterministic mode)")
    if report.fallback_intervals:
        lines.append(f"  fallback intervals: {report.fallback_intervals}")
    lines.append(f"  gnss outcomes: {report.gnss_outcomes}")
    if report.wait_counters:
        lines.append(f"  wait counters: {report.wait_counters}")
    for k, ok in report.passed.items():
        lines.append(f"  [{'PASS' if ok else 'FAIL'}] {k} < {report.thresholds[k]}")
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    spec = load_scenario(args.scenario)
    out = Path(args.output)
    write_log(generate(spec), out)
    with open(out / "scenario.yaml", "w") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False)
    print(f"wrote logs to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_scenario(args.source, cfg, args.output, realtime=args.realtime, speed=args.speed)
    print(_summary(result.report))
    return 0 if result.report.ok else 1


def cmd_report(args) -> int:
    path = Path(args.directory)
    path = path / "report.json" if path.is_dir() else path
    report = RunReport.from_json(path.read_text())
    print(_summary(report))
    return 0 if report.ok else 1


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    result = run_scenario(args.scenario, cfg, args.output, realtime=True, speed=args.speed)
    r = result.report
    print(_summary(r))
    if r.latency and r.latency["n"]:
        print(f"median IMU ingest latency {r.latency['median'] * 1e6:.1f} us over {r.latency['n']} samples")
    return 0 if r.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate sensor logs from a scenario file")
    s.add_argument("scenario")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the estimator on a scenario file or log directory")
    r.add_argument("source")
    r.add_argument("-c", "--config")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--realtime", action="store_true", help="threaded mode paced by the wall clock")
    r.add_argument("--speed", type=float, default=1.0, help="real-time replay speed factor")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="print a stored report")
    rp.add_argument("directory")
    rp.set_defaults(func=cmd_report)

    b = sub.add_parser("bench", help="real-time latency benchmark")
    b.add_argument("scenario")
    b.add_argument("-c", "--config")
    b.add_argument("-o", "--output")
    b.add_argument("--speed", type=float, default=1.0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LogParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
