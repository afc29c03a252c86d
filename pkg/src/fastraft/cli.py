"""Command line driver: single runs, loss sweeps, fuzzing, repro checks.

Every flag can also come from a key=value config file via --config;
explicit flags win.  Exit codes: 0 clean, 1 audit or check failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import (
    DEFAULT_LOSS_GRID,
    WorkloadSpec,
    audit_liveness,
    audit_safety,
    check_reproducer,
    fuzz_campaign,
    latency_sweep,
    run_workload,
)
from .sim import SimConfig, UniformDelay

USAGE_ERROR = 2


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="fastraft", description="consensus protocol simulator and test harness"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    commands = parser.add_subparsers(dest="command", metavar="command")
    subs: dict[str, argparse.ArgumentParser] = {}

    sim = commands.add_parser("sim", help="run one seeded workload and audit it")
    sim.add_argument("--config", help="key=value file supplying flag defaults")
    sim.add_argument("--protocol", choices=("raft", "fastraft"), default="fastraft")
    sim.add_argument("--nodes", type=int, default=3)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--loss", type=float, default=0.0, help="packet loss percent")
    sim.add_argument("--commands", type=int, default=20)
    sim.add_argument("--pattern", choices=("burst", "uniform"), default="burst")
    sim.add_argument(
        "--target", choices=("fixed", "round-robin", "random"), default="fixed"
    )
    sim.add_argument("--delay-min", type=float, default=1.0, help="one-way delay lower bound, ms")
    sim.add_argument("--delay-max", type=float, default=5.0, help="one-way delay upper bound, ms")
    sim.add_argument("--trace", help="write the delivery trace to this file")
    subs["sim"] = sim

    sweep = commands.add_parser("sweep", help="latency vs packet loss comparison")
    sweep.add_argument("--config", help="key=value file supplying flag defaults")
    sweep.add_argument("--out", default="sweep.csv", help="CSV output path")
    sweep.add_argument("--nodes", type=int, default=3)
    sweep.add_argument("--seeds", type=int, default=30, help="seeds per grid point")
    sweep.add_argument("--commands", type=int, default=200)
    sweep.add_argument("--base-seed", type=int, default=2024)
    sweep.add_argument(
        "--loss-grid",
        default=",".join(f"{x:g}" for x in DEFAULT_LOSS_GRID),
        help="comma-separated loss percents",
    )
    subs["sweep"] = sweep

    fuzz = commands.add_parser("fuzz", help="randomized fault schedules with audits")
    fuzz.add_argument("--config", help="key=value file supplying flag defaults")
    fuzz.add_argument("--count", type=int, default=None, help="number of seeds to run")
    fuzz.add_argument("--base-seed", type=int, default=0)
    fuzz.add_argument("--protocol", choices=("raft", "fastraft"), default=None)
    fuzz.add_argument("--nodes", type=int, default=None)
    fuzz.add_argument("--report-dir", default="fuzz-reports")
    subs["fuzz"] = fuzz

    check = commands.add_parser("check-trace", help="replay a fuzz reproducer")
    check.add_argument("reproducer", help="path to a repro-*.json file")
    subs["check-trace"] = check

    return parser, subs


def _load_config_file(parser: argparse.ArgumentParser, path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        parser.error(f"cannot read config file: {exc}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            parser.error(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(
    parser: argparse.ArgumentParser,
    sub: argparse.ArgumentParser,
    values: dict[str, str],
) -> None:
    known = {}
    for action in sub._actions:
        if action.dest in values:
            text = values[action.dest]
            try:
                known[action.dest] = action.type(text) if callable(action.type) else text
            except ValueError:
                parser.error(f"config value {text!r} invalid for {action.dest}")
    unknown = sorted(set(values) - set(known))
    if unknown:
        parser.error(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**known)


def _parse_loss_grid(parser: argparse.ArgumentParser, text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(piece) for piece in text.split(","))
    except ValueError:
        parser.error(f"malformed loss grid {text!r}")
    for loss in grid:
        if not 0.0 <= loss <= 100.0:
            parser.error(f"loss percent {loss:g} outside [0, 100]")
    return grid


def main(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return USAGE_ERROR
    if getattr(args, "config", None):
        sub = subs[args.command]
        _apply_config(parser, sub, _load_config_file(parser, args.config))
        args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "sim":
        return _cmd_sim(parser, args)
    if args.command == "sweep":
        return _cmd_sweep(parser, args)
    if args.command == "fuzz":
        return _cmd_fuzz(parser, args)
    return _cmd_check_trace(parser, args)


def _cmd_sim(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    if args.nodes < 1:
        parser.error(f"--nodes must be at least 1, got {args.nodes}")
    if not 0.0 <= args.loss <= 100.0:
        parser.error(f"--loss percent {args.loss:g} outside [0, 100]")
    if args.commands < 1:
        parser.error(f"--commands must be at least 1, got {args.commands}")
    if not 0 < args.delay_min <= args.delay_max:
        parser.error("delay bounds must satisfy 0 < min <= max")
    spec = WorkloadSpec(
        total_commands=args.commands,
        pattern=args.pattern,
        target_selection=args.target,
    )
    sim_config = SimConfig(
        seed=args.seed,
        loss_probability=args.loss / 100.0,
        delay=UniformDelay(args.delay_min, args.delay_max),
    )
    metrics, sim = run_workload(
        args.protocol, args.nodes, spec, sim_config, record_trace=args.trace is not None
    )
    if args.trace is not None:
        Path(args.trace).write_text(sim.trace_text())
    report = audit_safety(sim).merged_with(audit_liveness(sim, metrics))
    committed = metrics.committed_count()
    print(
        f"protocol={args.protocol} nodes={args.nodes} seed={args.seed} "
        f"loss={args.loss:g}% commands={args.commands}"
    )
    print(f"committed={committed} failures={metrics.failure_count}")
    if committed:
        print(
            f"latency_ms mean={metrics.mean_latency():.3f} "
            f"p50={metrics.p50():.3f} p99={metrics.p99():.3f} "
            f"fast_share={metrics.fast_share():.3f}"
        )
    counts = " ".join(f"{k}={v}" for k, v in sorted(metrics.message_counts.items()))
    print(f"messages {counts}")
    print(report.summary())
    return 0 if report.ok else 1


def _cmd_sweep(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    if args.nodes < 1:
        parser.error(f"--nodes must be at least 1, got {args.nodes}")
    if args.seeds < 1:
        parser.error(f"--seeds must be at least 1, got {args.seeds}")
    if args.commands < 1:
        parser.error(f"--commands must be at least 1, got {args.commands}")
    grid = _parse_loss_grid(parser, args.loss_grid)
    result = latency_sweep(
        loss_grid=grid,
        members=args.nodes,
        seeds=args.seeds,
        commands=args.commands,
        base_seed=args.base_seed,
    )
    Path(args.out).write_text(result.csv_text())
    print(result.csv_text(), end="")
    crossover = None
    for loss in grid:
        means = {
            row.protocol: row.mean_ms
            for row in result.rows
            if row.loss_percent == loss
        }
        if "raft" in means and "fastraft" in means and means["raft"] < means["fastraft"]:
            crossover = loss
            break
    if crossover is not None:
        print(f"# classic mean latency first wins at loss={crossover:g}%")
    else:
        print("# fast-track mean latency stayed ahead across the grid")
    if not result.audit.ok:
        print(result.audit.summary(), file=sys.stderr)
        return 1
    return 0


def _cmd_fuzz(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    if args.count is None:
        parser.error("--count is required")
    if args.count < 1:
        parser.error(f"--count must be at least 1, got {args.count}")
    if args.nodes is not None and args.nodes < 1:
        parser.error(f"--nodes must be at least 1, got {args.nodes}")
    failures = fuzz_campaign(
        args.count,
        base_seed=args.base_seed,
        report_dir=args.report_dir,
        protocol=args.protocol,
        members=args.nodes,
    )
    print(f"fuzz: {args.count} schedule(s), {len(failures)} failure(s)")
    for outcome in failures:
        print(f"  seed={outcome.seed} protocol={outcome.protocol} nodes={outcome.members}")
        for problem in outcome.problems:
            print(f"    {problem}")
    return 0 if not failures else 1


def _cmd_check_trace(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    try:
        ok, detail = check_reproducer(args.reproducer)
    except OSError as exc:
        parser.error(f"cannot read reproducer: {exc}")
    print(detail)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
