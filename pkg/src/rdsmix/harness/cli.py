"""``rdsmix`` command line.

Exit status: 0 when every check of the experiment passed, 1 when a check
failed, 2 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError
from .config import EXPERIMENTS, ExperimentConfig
from .experiments import run_experiment

log = logging.getLogger("rdsmix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdsmix", description="Mixing experiments for randomly forced systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="experiment configuration (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for ensemble blocks")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.config:
            cfg = ExperimentConfig.from_file(args.config, args.command)
        else:
            cfg = ExperimentConfig.default(args.command)
        cfg = cfg.with_overrides(seed=args.seed, output=args.out)
        result = run_experiment(cfg, workers=args.workers)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure of the experiment itself
        log.debug("experiment failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    status = "PASS" if result.passed else "FAIL"
    print(f"{result.name}: {status}")
    print(json.dumps({k: result.summary.get(k) for k in ("gamma", "C", "r2", "constants")}, sort_keys=True))
    for kind, path in result.files.items():
        print(f"  {kind}: {path}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
