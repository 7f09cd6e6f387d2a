"""Command-line batch experiment runner."""

from __future__ import annotations

import argparse
import datetime
import json
import sys

from .baseline import BaselineParams
from .experiment import BatchSpec, run_batch
from .strategy import StrategyParams
from .vehicle import VehicleParams

TRACK_ALIASES = {"l": "l_shape", "m": "m_shape", "ellipse": "ellipse"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="racecraft",
        description="Randomized overtaking experiments: paired strategy runs "
        "on pre-generated multi-vehicle scenarios.",
    )
    parser.add_argument("--track", choices=sorted(TRACK_ALIASES), default="m",
                        help="track shape (default: m)")
    parser.add_argument("--obstacles", type=int, default=9, metavar="N",
                        help="number of surrounding vehicles (default: 9)")
    parser.add_argument("--speed", choices=("v1", "v2", "v3"), default="v1",
                        help="obstacle target-speed interval (default: v1)")
    parser.add_argument("--runs", type=int, default=20, metavar="N",
                        help="randomized tests in the batch (default: 20)")
    parser.add_argument("--seed", type=int, default=1000, metavar="S",
                        help="base seed; run i uses S+i (default: 1000)")
    parser.add_argument("--strategy", choices=("itera", "baseline", "both"),
                        default="both", help="which controllers to run (default: both)")
    parser.add_argument("--laps-warmup", type=int, default=2, metavar="N",
                        help="tracking-controller laps recorded before each run (default: 2)")
    parser.add_argument("--warmup-strategy-laps", type=int, default=6, metavar="N",
                        help="obstacle-free learning laps added to the warmup memory (default: 6)")
    parser.add_argument("--out", default="out", metavar="DIR",
                        help="output directory (default: ./out)")
    parser.add_argument("--full", action="store_true",
                        help="restore the full 100-run protocol (overrides --runs)")
    parser.add_argument("--workers", type=int, default=1, metavar="W",
                        help="parallel episode workers (default: 1)")
    parser.add_argument("--snapshots", type=int, default=0, metavar="K",
                        help="render K SVG snapshots from the first seed of each cell")
    parser.add_argument("--max-sim-time", type=float, default=110.0, metavar="T",
                        help="episode time cap in seconds (default: 110)")
    parser.add_argument("--track-length", type=float, default=51.0, metavar="L")
    parser.add_argument("--track-width", type=float, default=2.0, metavar="W")
    parser.add_argument("--strategy-config", metavar="FILE",
                        help="JSON overrides for the racing strategy parameters")
    parser.add_argument("--baseline-config", metavar="FILE",
                        help="JSON overrides for the baseline parameters")
    parser.add_argument("--vehicle-config", metavar="FILE",
                        help="JSON overrides for the vehicle parameters")
    parser.add_argument("--no-timestamp", action="store_true",
                        help="omit the generated-at header (byte-stable reruns)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    strategies = ("itera", "baseline") if args.strategy == "both" else (args.strategy,)
    spec = BatchSpec(
        tracks=(TRACK_ALIASES[args.track],),
        speeds=(args.speed,),
        n_runs=100 if args.full else args.runs,
        n_obstacles=args.obstacles,
        seed_base=args.seed,
        strategies=strategies,
        laps_warmup=args.laps_warmup,
        warmup_strategy_laps=args.warmup_strategy_laps,
        track_length=args.track_length,
        track_width=args.track_width,
        max_sim_time=args.max_sim_time,
        out_dir=args.out,
        workers=args.workers,
        snapshots=args.snapshots,
    )
    vehicle = VehicleParams.default()
    if args.vehicle_config:
        vehicle = VehicleParams.from_json(open(args.vehicle_config).read())
    strategy_params = StrategyParams()
    if args.strategy_config:
        strategy_params = StrategyParams.from_json(open(args.strategy_config).read())
    baseline_params = BaselineParams()
    if args.baseline_config:
        baseline_params = BaselineParams.from_json(open(args.baseline_config).read())
    timestamp = (
        None
        if args.no_timestamp
        else datetime.datetime.now(datetime.timezone.utc).isoformat()
    )
    summary = run_batch(spec, vehicle, strategy_params, baseline_params, timestamp)
    for cell in summary["cells"]:
        cats = cell["categories"]
        print(f"[{cell['track']} {cell['speed']}] n={cats['n']}")
        for key in ("both_succeed", "only_itera", "only_baseline", "both_fail"):
            print(f"  {key}: {cats[key]['count']} ({cats[key]['percent']:.0f}%)")
        for name, stats in sorted(cell["solve_stats"].items()):
            if stats["mean"] is not None:
                print(
                    f"  {name} overtaking solve time: mean {stats['mean']*1e3:.1f} ms, "
                    f"p95 {stats['p95']*1e3:.1f} ms over {stats['n_steps']} steps"
                )
    print(f"outputs in {spec.out_dir}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
