"""Command-line entry point: ``uraloc <command> --scenario FILE --seed N --out DIR``.

Exit codes: 0 success, 2 usage or scenario error, 3 pipeline stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from . import pipeline
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_SCENARIO, EXIT_STAGE = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uraloc", description="Switched-URA CSI simulation, calibration and localization.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(name: str, help_text: str, multi: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        if multi:
            p.add_argument("--scenario", required=True, action="append", help="scenario file (repeatable)")
        else:
            p.add_argument("--scenario", required=True, help="scenario file")
        p.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
        p.add_argument("--out", required=True, help="output directory")
        return p

    common("simulate", "write simulated capture files")
    p = common("calibrate", "measure and apply phase calibration")
    p.add_argument("--captures", help="read captures from this directory instead of simulating")
    p.add_argument("--load-profile", help="apply a saved calibration profile instead of measuring one")
    p.add_argument("--save-profile", help="where to write the profile (default OUT/profiles.json)")
    p = common("aoa", "AoA spectra, peaks and error table")
    p.add_argument("--method", action="append", choices=["music", "ss-music", "i-ssmusic"],
                   help="estimator(s) to run; repeat for a sweep (default: scenario methods)")
    p.add_argument("--captures", help="read captures from this directory instead of simulating")
    p = common("locate", "paired GP / DPD localization trials")
    p.add_argument("--method", action="append", choices=["gp", "dpd"], help="locator(s) (default: scenario methods)")
    p = common("track", "fixes along the scenario trajectory, raw and smoothed")
    p.add_argument("--method", choices=["gp", "dpd"], help="locator (default: dpd when configured)")
    common("bench", "per-stage timing over repeated runs", multi=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "bench":
            scenarios = [load_scenario(p) for p in args.scenario]
        else:
            scenarios = [load_scenario(args.scenario)]
    except ScenarioError as exc:
        print(f"error [scenario]: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    scn = scenarios[0]
    seed = scn.seed if args.seed is None else args.seed
    try:
        if args.command == "simulate":
            result = pipeline.run_simulate(scn, seed, args.out)
        elif args.command == "calibrate":
            result = pipeline.run_calibrate(scn, seed, args.out, args.captures, args.load_profile, args.save_profile)
        elif args.command == "aoa":
            result = pipeline.run_aoa(scn, seed, args.out, args.method, args.captures)
        elif args.command == "locate":
            result = pipeline.run_locate(scn, seed, args.out, args.method)
        elif args.command == "track":
            result = pipeline.run_track(scn, seed, args.out, args.method)
        else:
            result = pipeline.run_bench(scenarios, seed, args.out)
    except pipeline.StageError as exc:
        print(f"error [stage={exc.stage}]: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
