"""Command-line entry point.

``cablegff <subcommand> --config PATH [--seed N] [--out DIR] [--replicas N] [--threads N]``

Exit status: 0 when every asserted check passes, 1 when a check fails or
the run is incomplete, 2 on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import KINDS, ConfigError, load_config
from .experiments import emit_report, run

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cablegff", description="Monte Carlo experiments for the free field and its cable system.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run the {kind} experiment")
        s.add_argument("--config", help="configuration file (sectioned key = value, or JSON)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--replicas", type=int)
        s.add_argument("--threads", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {("experiment", "kind"): args.kind, ("experiment", "seed"): args.seed,
                 ("experiment", "out"): args.out, ("experiment", "replicas"): args.replicas,
                 ("experiment", "threads"): args.threads}
    try:
        cfg = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"cablegff: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    result = run(cfg)
    try:
        paths = emit_report(result, cfg)
    except OSError as exc:
        print(f"cablegff: cannot write report: {exc}", file=sys.stderr)
        return EXIT_FAIL
    failed = [k for k, v in result.checks.items() if not v]
    print(f"{cfg.kind}: report {paths['json']}")
    for k in failed:
        print(f"  FAILED {k}")
    if result.incomplete:
        print("  incomplete run (see log)")
    return EXIT_PASS if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
