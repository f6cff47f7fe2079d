"""Command-line entry point.

    magshift all --config exp.ini [--out DIR] [--seed N] [--jobs K]
    magshift split|train|eval|signature --config exp.ini ...
    magshift validate --config exp.ini

Exit codes: 0 success, 1 configuration error, 2 runtime error. The output
directory can also be set with the ``MAGSHIFT_OUT`` environment variable;
``--out`` wins over it, and it wins over the config file.
"""

from __future__ import annotations

import argparse
import sys

from .config import InvalidConfigError, load_config, validate_config
from .pipeline import STAGES, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magshift", description="Magnification-shift experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("all", "run every stage"),
        ("split", "patient-disjoint split and LOMO fold manifests"),
        ("train", "train every method on every fold"),
        ("eval", "evaluate trained models on held-out magnifications"),
        ("signature", "sparse signatures and stability report"),
        ("validate", "check a config file and list every problem"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--out", help="output directory (overrides MAGSHIFT_OUT and the config)")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--jobs", type=int, help="worker processes; 0 = one per CPU")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"output_dir": args.out, "seed": args.seed, "jobs": args.jobs}
    try:
        if args.command == "validate":
            errors = validate_config(args.config, overrides)
            for e in errors:
                print(f"error: {e}", file=sys.stderr)
            if not errors:
                print("ok")
            return EXIT_CONFIG if errors else EXIT_OK
        cfg = load_config(args.config, overrides)
    except InvalidConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG

    stages = STAGES if args.command == "all" else (args.command,)
    result = run_experiment(cfg, stages)
    if result.status:
        print(f"failed: {result.message}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"done: {', '.join(stages)} -> {result.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
