"""Command-line entry point: ``seedshift {train,sweep,overlap,trajectory,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from seedshift import commands, config
from seedshift.denoiser import CheckpointError, ConfigurationError, TrainingDivergedError

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_RUNTIME = 1


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seedshift", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train the configured denoiser networks"),
                        ("sweep", "evaluate every model on the shift grid"),
                        ("overlap", "tabulate overlap of shifted seeds with N(0, 1)"),
                        ("trajectory", "record paired reverse trajectories and ESD"),
                        ("report", "render plots and a markdown summary of a run directory"),
                        ("defaults", "print the default configuration as YAML")):
        p = sub.add_parser(name, help=help_)
        if name == "defaults":
            continue
        if name == "report":
            p.add_argument("run_dir", type=Path, nargs="?", help="run directory (defaults to --out)")
        else:
            p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
            p.add_argument("--seed", type=_u64, default=None, help="override the master seed")
        p.add_argument("--out", type=Path, default=None if name == "report" else Path("run"),
                       help="output directory" + (" (defaults to the run directory)" if name == "report" else ""))
        p.add_argument("--jobs", type=int, default=1, help="worker processes for the sweep")
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "defaults":
            sys.stdout.write(config.dump_defaults())
            return 0
        if args.command == "report":
            run_dir = args.run_dir or args.out
            if run_dir is None:
                return _fail("usage", "report needs a run directory", EXIT_CONFIG, field="run_dir")
            outputs = commands.cmd_report(run_dir, args.out)
        else:
            cfg = config.load(args.config, args.seed)
            if args.command == "train":
                outputs = commands.cmd_train(cfg, args.out)
            elif args.command == "sweep":
                outputs = commands.cmd_sweep(cfg, args.out, jobs=args.jobs)
            elif args.command == "overlap":
                outputs = commands.cmd_overlap(cfg, args.out)
            else:
                outputs = commands.cmd_trajectory(cfg, args.out)
    except config.ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, field=exc.field)
    except (ConfigurationError, CheckpointError) as exc:
        return _fail("configuration", str(exc), EXIT_CONFIG)
    except commands.DependencyError as exc:
        return _fail("dependency", str(exc), EXIT_DEPENDENCY)
    except TrainingDivergedError as exc:
        return _fail("training_diverged", str(exc), EXIT_RUNTIME, step=exc.step)
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
