"""``cake-bench`` command line: populate, bench, oracle, overhead."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .config import ConfigError, load_experiment


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file layered over the packaged defaults")
    common.add_argument("--out", type=Path, help="results CSV path (overrides [experiment] out)")
    common.add_argument("--mode", choices=("sim", "live"), help="clock mode (overrides config)")
    common.add_argument("--verbose", "-v", action="store_true", help="write per-run event logs; debug logging")
    common.add_argument("--parallel", action="store_true", help="run sim-mode cells in worker processes")

    p = argparse.ArgumentParser(prog="cake-bench", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("populate", parents=[common], help="write synthetic KV chunks to the store")
    sub.add_parser("bench", parents=[common], help="run the experiment matrix, write CSV")
    sub.add_parser("oracle", parents=[common], help="compare cake against the best static split")
    sub.add_parser("overhead", parents=[common], help="micro-benchmark the per-chunk decision")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_experiment(args.config, clock=args.mode, out=args.out)
    except (ConfigError, ValueError) as exc:
        print(f"cake-bench: bad config: {exc}", file=sys.stderr)
        return 2
    if args.verb == "populate":
        return bench.cmd_populate(cfg)
    if args.verb == "bench":
        return bench.cmd_bench(cfg, verbose=args.verbose, parallel=args.parallel)
    if args.verb == "oracle":
        return bench.cmd_oracle(cfg)
    return bench.cmd_overhead(cfg)


if __name__ == "__main__":
    sys.exit(main())
