"""Command-line entry point.

    adaptsim run --scenario s.json --seed 1 --mode level --until 600 --out out/
    adaptsim compare --scenario s.json --seeds 1,2,3
    adaptsim validate --scenario s.json

Exit status is 0 unless the scenario is invalid (2) or an internal
invariant of the simulator is violated (1). A run that fails to converge
still exits 0 — non-convergence is a reported result, not an error.
ADAPTSIM_LOG controls log verbosity only; it never affects trace content.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .harness import compare_modes, run_scenario
from .scenario import ScenarioError, load_scenario

log = logging.getLogger("adaptsim")


def _setup_logging() -> None:
    level = os.environ.get("ADAPTSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="adaptsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write trace + report")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int, default=1)
    run.add_argument("--mode", choices=["level", "event"], default="level")
    run.add_argument("--until", type=int, default=None, help="override the scenario's untilSeconds")
    run.add_argument("--out", default=None, help="output directory for trace.jsonl and report.json")
    run.add_argument("--controllers", default=None, help="comma-separated subset of lowpower,bluegreen,rainbow")

    compare = sub.add_parser("compare", help="run seeds under both modes and compare convergence")
    compare.add_argument("--scenario", required=True)
    compare.add_argument("--seeds", required=True, help="comma-separated seed list")
    compare.add_argument("--until", type=int, default=None)
    compare.add_argument("--out", default=None)

    validate = sub.add_parser("validate", help="check a scenario file and exit")
    validate.add_argument("--scenario", required=True)

    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _parse_args(argv)
    try:
        if args.command == "validate":
            load_scenario(args.scenario)
            print(f"{args.scenario}: OK")
            return 0
        if args.command == "run":
            controllers = args.controllers.split(",") if args.controllers else None
            report = run_scenario(
                args.scenario,
                seed=args.seed,
                mode=args.mode,
                until_seconds=args.until,
                out_dir=args.out,
                controllers=controllers,
            )
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
            return 0
        if args.command == "compare":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            summary = compare_modes(args.scenario, seeds, until_seconds=args.until, out_dir=args.out)
            print(json.dumps(summary, indent=2, sort_keys=True))
            return 0
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal invariant violations abort the run
        log.exception("run aborted")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
