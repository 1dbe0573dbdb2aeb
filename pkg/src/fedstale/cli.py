"""Command-line entry point.

    fedstale train           --spec run.cfg --out results/run
    fedstale staleness-check --spec stale.cfg
    fedstale verify-lemma1   --spec lemma.cfg --threads 4
    fedstale check-theorem   --spec bound.cfg --seeds 20
    fedstale sweep           --spec grid.cfg

Exit codes: 0 all checks passed, 2 a check failed, 3 configuration error,
4 numeric divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import load_spec, validate
from .errors import FedStaleError
from .harness import run_experiment

COMMANDS = {
    "train": "train",
    "staleness-check": "staleness",
    "verify-lemma1": "lemma1",
    "check-theorem": "theorem",
    "sweep": "sweep",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedstale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--spec", required=True, help="experiment spec file (key = value lines)")
        p.add_argument("--out", default=None, help="output directory (default: spec 'out' or results/<name>)")
        p.add_argument("--seeds", type=int, default=None, help="override the number of replicate seeds")
        p.add_argument("--threads", type=int, default=1, help="worker threads; never changes outputs")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        spec = load_spec(args.spec)
        task = COMMANDS[args.command]
        if task != spec.task:
            spec = replace(spec, task=task)
            if task == "lemma1" and spec.staleness_mode == "emergent":
                # spec written for another task: fall back to the mode the check needs
                spec = replace(spec, staleness_mode="synthetic")
        if args.seeds is not None:
            spec = replace(spec, seeds=args.seeds)
        validate(spec)
    except FedStaleError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code

    manifest = run_experiment(spec, args.out, threads=max(1, args.threads))
    if manifest.error:
        print(f"error: {manifest.error}", file=sys.stderr)
    elif not args.quiet:
        print(f"{spec.task} {'passed' if manifest.passed else 'FAILED'} -> {manifest.summary_path} "
              f"({manifest.wall_clock:.1f}s)", file=sys.stderr)
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
