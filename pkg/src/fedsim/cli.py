"""Command-line entry point: run, compare, and sweep subcommands.

Exit codes: 0 on success, 2 for configuration or usage errors, 1 for
runtime failures. FEDSIM_LOG sets log verbosity only; it never changes
results.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .harness import (
    ConfigError,
    load_config,
    emit,
    report_to_dict,
    run_compare,
    run_experiment,
    run_sweep,
)

log = logging.getLogger("fedsim")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated fine-tuning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--out", default=None, help="report path (overrides config output)")
        p.add_argument("--format", default="json", choices=("json", "csv"),
                       help="report format (default json)")

    common(sub.add_parser("run", help="run one experiment"))
    common(sub.add_parser(
        "compare",
        help="run centralized, fl_only, and ffm over identical data seeds",
    ))
    sweep = sub.add_parser("sweep", help="rerun the experiment across k-shot sizes")
    common(sweep)
    sweep.add_argument("--kshots", required=True,
                       help="comma-separated k values, e.g. 4,8,16,32,64")
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("FEDSIM_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    try:
        config = load_config(args.config)
        out_path = args.out or config.output
        if args.command == "run":
            report = run_experiment(config)
            document = report_to_dict(report)
            log.info(
                "run finished in %.2fs: %s accuracy %.4f",
                report.wall_time_sec,
                report.summary["stat"],
                report.summary["accuracy"],
            )
        elif args.command == "compare":
            document = run_compare(config)
            for mode, regime in document["regimes"].items():
                log.info(
                    "%s: %s accuracy %.4f", mode,
                    regime["summary"]["stat"], regime["summary"]["accuracy"],
                )
        else:
            try:
                kshots = [int(part) for part in args.kshots.split(",") if part.strip()]
            except ValueError:
                raise ConfigError(
                    f"--kshots must be comma-separated integers, got {args.kshots!r}"
                ) from None
            document = run_sweep(config, kshots)
            for entry in document["entries"]:
                log.info(
                    "k=%d: %s accuracy %.4f", entry["k_shot"],
                    entry["summary"]["stat"], entry["summary"]["accuracy"],
                )
        emit(document, args.format, out_path)
    except ConfigError as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"fedsim: error: {exc}", file=sys.stderr)
        return 1
    print(out_path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
