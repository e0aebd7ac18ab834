"""Command line entry point.

Exit status: 0 when every verdict passes, 1 on a failing verdict or a log
difference, 2 on configuration errors, 3 when the engine hits an internal
invariant violation such as a stalled merge.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import ExitStack
from pathlib import Path

from ..enclave_sim import AttestationFailure
from ..event_core import EventDecodeError, encode_log
from ..ordering import OrderingError
from .oracle import oracle_run
from .report import diff_logs, render
from .runner import parse_range, run_scenario, sweep, sweep_points
from .scenario import ConfigError, load_scenario

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


def _enclave_flag(value: str | None) -> bool | None:
    return None if value is None else value == "on"


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    with ExitStack() as stack:
        trace = stack.enter_context(open(args.trace, "w")) if args.trace else None
        outcome = run_scenario(scenario, seed=args.seed, enclave=_enclave_flag(args.enclave), trace=trace)
    report = outcome.report
    print(report.to_text())
    if args.report:
        fmt = "text" if args.report.endswith(".txt") else "json"
        Path(args.report).write_text(render(report, fmt))
    if args.log:
        Path(args.log).write_bytes(encode_log(outcome.result.sink_log))
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_oracle(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_changes(seed=args.seed)
    data = encode_log(oracle_run(scenario).sink_log)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    return EXIT_PASS


def cmd_diff(args: argparse.Namespace) -> int:
    try:
        a = Path(args.log_a).read_bytes()
        b = Path(args.log_b).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read log: {exc}") from exc
    try:
        result = diff_logs(a, b)
    except EventDecodeError as exc:
        raise ConfigError(f"not an output log: {exc}") from exc
    print(result.describe())
    return EXIT_PASS if result.equal else EXIT_FAIL


def cmd_sweep(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_changes(seed=args.seed)
    lo, hi = parse_range(args.migrate_at)
    results = sweep(scenario, sweep_points(lo, hi, args.step), enclave=_enclave_flag(args.enclave))
    failed = 0
    for at, outcome in results:
        report = outcome.report
        if not report.passed:
            failed += 1
        print(f"migrate-at {at:>6}: {report.verdict}  output {report.output_diff}  "
              f"output duplicates dropped {report.output_duplicates_dropped}")
    print(f"{len(results) - failed}/{len(results)} runs passed")
    return EXIT_PASS if failed == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastream", description="Run elastic event-stream scenarios against a single-process oracle.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log migration phases")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and compare against the oracle")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--report", help="write the report (JSON, or text for *.txt)")
    run.add_argument("--trace", help="write a per-delivery trace")
    run.add_argument("--log", help="write the sink output log")
    run.add_argument("--enclave", choices=["on", "off"])
    run.set_defaults(func=cmd_run)

    oracle = sub.add_parser("oracle", help="write the reference output log")
    oracle.add_argument("scenario")
    oracle.add_argument("--seed", type=int)
    oracle.add_argument("--out", help="output file (default: stdout)")
    oracle.set_defaults(func=cmd_oracle)

    diff = sub.add_parser("diff", help="byte-compare two output logs")
    diff.add_argument("log_a")
    diff.add_argument("log_b")
    diff.set_defaults(func=cmd_diff)

    sw = sub.add_parser("sweep", help="run once per migration trigger point")
    sw.add_argument("scenario")
    sw.add_argument("--migrate-at", required=True, metavar="A..B")
    sw.add_argument("--step", type=int, default=1)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--enclave", choices=["on", "off"])
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, AttestationFailure) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OrderingError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
