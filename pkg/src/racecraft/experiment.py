"""Batch experiment protocol: paired randomized overtaking tests.

A batch sweeps scenario cells (track shape x obstacle speed interval),
running both strategies on bit-identical pre-generated scenarios per seed,
then aggregates success categories, overtake-count histograms, and
compute-time statistics restricted to overtaking phases.  Outputs are
deterministic byte-for-byte given the same spec, apart from an optional
timestamp header.
"""

from __future__ import annotations

import copy
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import track as trk
from .baseline import BaselineController, BaselineParams
from .memory import LapMemory
from .render import render_snapshot
from .simulation import (
    EpisodeLog,
    PidController,
    Scenario,
    ScenarioConfig,
    make_scenario,
    run_episode,
    run_laps,
)
from .strategy import RacingController, StrategyParams
from .vehicle import VehicleParams

STRATEGY_NAMES = ("itera", "baseline")


@dataclass
class BatchSpec:
    tracks: tuple = ("m_shape",)
    speeds: tuple = ("v1",)
    n_runs: int = 20
    n_obstacles: int = 9
    seed_base: int = 1000
    strategies: tuple = STRATEGY_NAMES
    laps_warmup: int = 2
    warmup_strategy_laps: int = 6
    warmup_speed: float = 0.8
    track_length: float = 51.0
    track_width: float = 2.0
    max_sim_time: float = 110.0
    out_dir: str | None = None
    workers: int = 1
    snapshots: int = 0  # per cell: snapshot count rendered from the first seed

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        for s in self.strategies:
            if s not in STRATEGY_NAMES:
                raise ValueError(f"unknown strategy {s!r}")

    def cells(self):
        for shape in self.tracks:
            for speed in self.speeds:
                yield shape, speed


def build_warmup_memory(
    track: trk.TrackLayout,
    vehicle: VehicleParams,
    n_laps: int = 2,
    v_target: float = 0.8,
    strategy_laps: int = 0,
    strategy_params: StrategyParams | None = None,
) -> LapMemory:
    """Initial data collected before any racing run.

    Constant-target PID laps seed the memory; optional obstacle-free
    strategy laps then let the planner learn the track at speed, which is
    what racing tests start from.  Both strategies receive copies of the
    same memory, so paired comparisons stay paired.
    """
    memory = LapMemory(track.total_length)
    pid = PidController(v_target=v_target, vehicle=vehicle)
    _, x = run_laps(track, pid, memory, n_laps, vehicle)
    if strategy_laps:
        controller = RacingController(track, vehicle, strategy_params)
        run_laps(track, controller, memory, strategy_laps, vehicle, x0=x)
    return memory


def make_controller(name: str, track, vehicle,
                    strategy_params: StrategyParams | None = None,
                    baseline_params: BaselineParams | None = None):
    if name == "itera":
        return RacingController(track, vehicle, strategy_params)
    if name == "baseline":
        return BaselineController(track, vehicle, baseline_params)
    raise ValueError(f"unknown strategy {name!r}")


def run_paired_episode(
    scenario: Scenario,
    warmup: LapMemory,
    strategies,
    vehicle: VehicleParams,
    strategy_params: StrategyParams | None = None,
    baseline_params: BaselineParams | None = None,
    keep_predictions: bool = False,
) -> dict[str, EpisodeLog]:
    """Run each strategy on the identical scenario from a copied warmup memory."""
    out: dict[str, EpisodeLog] = {}
    for name in strategies:
        memory = copy.deepcopy(warmup)
        controller = make_controller(name, scenario.track, vehicle,
                                     strategy_params, baseline_params)
        out[name] = run_episode(
            scenario, controller, vehicle, memory,
            horizon=controller.horizon, keep_predictions=keep_predictions,
        )
    return out


def _run_seed_job(args):
    (seed, shape, speed, spec_doc, strategy_doc, baseline_doc, vehicle_doc, warmup) = args
    spec = BatchSpec(**spec_doc)
    vehicle = VehicleParams(**vehicle_doc)
    strategy_params = StrategyParams.from_json(strategy_doc)
    baseline_params = BaselineParams.from_json(baseline_doc)
    config = ScenarioConfig(
        track_shape=shape,
        track_length=spec.track_length,
        track_width=spec.track_width,
        n_obstacles=spec.n_obstacles,
        speed_interval=speed,
        seed=seed,
        max_sim_time=spec.max_sim_time,
    )
    scenario = make_scenario(config, vehicle)
    if warmup is None:
        warmup = build_warmup_memory(
            scenario.track, vehicle, spec.laps_warmup, spec.warmup_speed,
            spec.warmup_strategy_laps, strategy_params,
        )
    logs = run_paired_episode(
        scenario, warmup, spec.strategies, vehicle,
        strategy_params, baseline_params,
        keep_predictions=spec.snapshots > 0,
    )
    summaries = {
        name: log.summary(scenario, vehicle) for name, log in logs.items()
    }
    return seed, logs, summaries, scenario


@dataclass
class CellResult:
    shape: str
    speed: str
    seeds: list = field(default_factory=list)
    summaries: dict = field(default_factory=dict)  # strategy -> list of dicts
    categories: dict = field(default_factory=dict)
    histogram: dict = field(default_factory=dict)  # strategy -> counts list
    solve_stats: dict = field(default_factory=dict)


def categorize(per_seed: list[dict[str, dict]]) -> dict:
    """Four-way paired success classification over seeds.

    With a single implemented baseline, "any baseline" reduces to it; the
    output metadata records that.
    """
    counts = {"both_succeed": 0, "only_itera": 0, "only_baseline": 0, "both_fail": 0}
    for summaries in per_seed:
        a = bool(summaries.get("itera", {}).get("success"))
        b = bool(summaries.get("baseline", {}).get("success"))
        if a and b:
            counts["both_succeed"] += 1
        elif a:
            counts["only_itera"] += 1
        elif b:
            counts["only_baseline"] += 1
        else:
            counts["both_fail"] += 1
    n = max(1, len(per_seed))
    out = {k: {"count": v, "percent": 100.0 * v / n} for k, v in counts.items()}
    out["n"] = len(per_seed)
    out["baselines_compared"] = ["baseline"]
    return out


def overtake_histogram(overtaken_counts, n_obstacles: int) -> list[int]:
    bins = [0] * (n_obstacles + 1)
    for c in overtaken_counts:
        bins[min(max(int(c), 0), n_obstacles)] += 1
    return bins


def summarize_compute(logs: list[EpisodeLog]) -> dict:
    """Solve-time statistics over overtaking-phase steps only."""
    times: list[float] = []
    for log in logs:
        for t, phase in zip(log.solve_time, log.overtaking):
            if phase and t is not None:
                times.append(t)
    if not times:
        return {"n_steps": 0, "mean": None, "median": None, "p95": None, "max": None}
    arr = np.array(times)
    return {
        "n_steps": int(arr.size),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
    }


def run_batch(
    spec: BatchSpec,
    vehicle: VehicleParams | None = None,
    strategy_params: StrategyParams | None = None,
    baseline_params: BaselineParams | None = None,
    timestamp: str | None = None,
) -> dict:
    """Execute the full sweep; write per-run CSVs and aggregate JSON/CSV."""
    vehicle = vehicle or VehicleParams()
    strategy_params = strategy_params or StrategyParams()
    baseline_params = baseline_params or BaselineParams()
    out_root = spec.out_dir
    if out_root:
        os.makedirs(out_root, exist_ok=True)

    batch_summary = {"cells": [], "spec": {**spec.__dict__}, "note": (
        "paired comparison against the single implemented baseline"
    )}
    spec_doc = dict(spec.__dict__)
    for shape, speed in spec.cells():
        seeds = [spec.seed_base + i for i in range(spec.n_runs)]
        # warmup only depends on the track: collect it once per cell and
        # hand every seed its own copy (workers rebuild it instead, since
        # shipping it to subprocesses costs more than the laps)
        cell_track = trk.build_track(shape, spec.track_length, spec.track_width)
        warmup = None
        if spec.workers <= 1:
            warmup = build_warmup_memory(
                cell_track, vehicle, spec.laps_warmup, spec.warmup_speed,
                spec.warmup_strategy_laps, strategy_params,
            )
        jobs = [
            (seed, shape, speed, spec_doc, strategy_params.to_json(),
             baseline_params.to_json(), vehicle.__dict__, warmup)
            for seed in seeds
        ]
        results = []
        if spec.workers > 1:
            with ProcessPoolExecutor(max_workers=spec.workers) as pool:
                for res in pool.map(_run_seed_job, jobs):
                    results.append(res)
        else:
            results = [_run_seed_job(j) for j in jobs]
        results.sort(key=lambda r: r[0])

        cell = CellResult(shape, speed)
        per_seed_summaries = []
        cell_logs: dict[str, list[EpisodeLog]] = {s: [] for s in spec.strategies}
        for seed, logs, summaries, scenario in results:
            cell.seeds.append(seed)
            per_seed_summaries.append(summaries)
            for name, log in logs.items():
                cell_logs[name].append(log)
            if out_root:
                run_dir = os.path.join(out_root, "runs", str(seed))
                os.makedirs(run_dir, exist_ok=True)
                for name, log in logs.items():
                    log.to_csv(os.path.join(run_dir, f"{name}.csv"), timestamp)
                    with open(os.path.join(run_dir, f"{name}_summary.json"), "w") as fh:
                        json.dump(summaries[name], fh, indent=2, sort_keys=True)
            if out_root and spec.snapshots and seed == seeds[0]:
                snap_dir = os.path.join(out_root, "snapshots")
                os.makedirs(snap_dir, exist_ok=True)
                for name, log in logs.items():
                    n_avail = len(log.steps)
                    for j in range(min(spec.snapshots, n_avail)):
                        t_idx = j * max(1, n_avail // max(1, spec.snapshots))
                        svg = render_snapshot(log, t_idx, scenario.track, vehicle)
                        fname = f"{shape}_{speed}_{seed}_{name}_{t_idx:04d}.svg"
                        with open(os.path.join(snap_dir, fname), "w") as fh:
                            fh.write(svg)

        cell.summaries = {
            name: [s.get(name) for s in per_seed_summaries] for name in spec.strategies
        }
        cell.categories = categorize(per_seed_summaries)
        cell.histogram = {
            name: overtake_histogram(
                [s[name].get("overtaken", 0) for s in per_seed_summaries],
                spec.n_obstacles,
            )
            for name in spec.strategies
        }
        cell.solve_stats = {
            name: summarize_compute(cell_logs[name]) for name in spec.strategies
        }
        batch_summary["cells"].append({
            "track": shape,
            "speed": speed,
            "seeds": cell.seeds,
            "categories": cell.categories,
            "histogram": cell.histogram,
            "solve_stats": cell.solve_stats,
            "per_seed": per_seed_summaries,
        })

    if out_root:
        doc = dict(batch_summary)
        if timestamp is not None:
            doc["generated_at"] = timestamp
        with open(os.path.join(out_root, "summary.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        _write_histogram_csv(os.path.join(out_root, "histogram.csv"), batch_summary)
    return batch_summary


def _write_histogram_csv(path: str, batch_summary: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("track,speed,strategy,overtaken,count\n")
        for cell in batch_summary["cells"]:
            for name, bins in sorted(cell["histogram"].items()):
                for k, count in enumerate(bins):
                    fh.write(f"{cell['track']},{cell['speed']},{name},{k},{count}\n")
