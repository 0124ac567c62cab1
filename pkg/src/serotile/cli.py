"""Command-line entry point.

One subcommand per pipeline stage plus ``run-all``. All commands take a
config file; ``--seed`` and ``--workers`` override the config for quick
experiments. Exit codes: 0 success, 2 config error, 3 missing input,
4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from .config import load_config
from .errors import ConfigError, MissingInputError, SerotileError
from .pipeline import STAGE_NAMES, run_all, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_STAGE_FAILURE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serotile",
        description="H&E tile pipeline: stains, cells, patches, subjects.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_NAMES + ("run-all",):
        cmd = sub.add_parser(name, help=f"run the {name} stage"
                             if name != "run-all" else "run every stage")
        cmd.add_argument("--config", required=True,
                         help="path to the pipeline config JSON")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--workers", type=int, default=None,
                         help="override the config worker count")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers must be at least 1")
            cfg.workers = args.workers
        if args.command == "run-all":
            run_all(cfg)
        else:
            run_stage(cfg, args.command)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except MissingInputError as exc:
        return _fail(EXIT_MISSING_INPUT, exc)
    except SerotileError as exc:
        return _fail(EXIT_STAGE_FAILURE, exc)
    except Exception as exc:  # anything unplanned is a stage failure
        traceback.print_exc()
        return _fail(EXIT_STAGE_FAILURE, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
