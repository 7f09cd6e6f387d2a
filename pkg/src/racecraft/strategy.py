"""Unified planning-control step for racing among moving vehicles.

Each control period the planner queries the lap memory for the K nearest
recorded states, treats every one of them as a candidate terminal target,
and solves a barrier-iLQR tracking problem per candidate on a freshly fit
affine model.  Obstacles inside the overtaking range attach ellipse
barriers; when a candidate trajectory still cuts through an obstacle, the
weights are relaxed (terminal and input costs down, barrier sharpness up)
and the candidate is re-solved, trading reachability for clearance.  The
executed trajectory is the feasible candidate with the smallest
cost-to-go, which is what pulls lap times down lap over lap.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import track as trk
from .ilqr import (
    CostSpec,
    OpenLoopTrajectory,
    QuadraticBarrier,
    input_box_barriers,
    rollout,
    solve,
    state_bound_barriers,
)
from .memory import HistoryPoint, LapMemory
from .simulation import DT_CONTROL, DT_SIM, _wrapped_diff
from .vehicle import ACC, EY, S, STEER, VX, ATVModel, VehicleParams, fit_atv_model


@dataclass
class StrategyParams:
    """Tuning of the racing strategy; defaults match the evaluation setup."""

    k_neighbors: int = 32
    horizon: int = 12
    qn_base: tuple = (1.0, 1.0, 1.0, 1.0, 30.0, 30.0)
    r_base: tuple = (1.0, 10.0)
    dr_base: tuple = (5.0, 50.0)
    m_qn: float = 20.0
    m_r: float = 5.0
    m_dr: float = 1.1
    m_q2: float = 0.1
    eps_margin: float = 5.0  # overtaking-range margin ratio
    gamma_pred: float = 2.0  # overtaking-range prediction ratio
    s_safe: float = 0.1
    t_safe: float = 2.0
    eps1: float = 0.4  # terminal tracking bound, no obstacles
    eps2: float = 1.0  # terminal tracking bound, with obstacles
    psi1: float = 0.0  # convergence-ratio bound, no obstacles
    psi2: float = 0.03  # convergence-ratio bound, with obstacles
    max_weight_iters: int = 2
    mode: str = "sequential"
    q1: float = 1.0
    q1_obstacle: float = 5.0
    q1_bounds: float = 10.0
    q2_obstacle: float = 2.5
    q2_bounds: float = 10.0
    # planning buffer on top of the planar safety criterion: a static floor
    # plus a term growing with relative speed, where model error lives
    margin_static: float = 0.01
    margin_rate: float = 0.08  # [m^2 per m/s of relative speed]
    dz: tuple = (0.1, 0.1, 0.1, 0.1, 1.0, 1.0)
    lap_window: int = 2
    n_reg: int = 40
    max_ilqr_iters: int = 50
    ilqr_tol: float = 1e-6
    parallel_workers: int = 4

    def __post_init__(self):
        if not (self.m_qn > 1 and self.m_r > 1 and self.m_dr > 1):
            raise ValueError("adaptive weight ratios must exceed 1")
        if not 0 < self.m_q2 < 1:
            raise ValueError("m_q2 must lie in (0, 1)")
        if self.eps2 < self.eps1 or self.psi2 < self.psi1:
            raise ValueError("obstacle-mode bounds must dominate free-mode bounds")
        if self.mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "StrategyParams":
        doc = json.loads(text)
        for key in ("qn_base", "r_base", "dr_base", "dz"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return StrategyParams(**doc)


@dataclass
class CandidateSolution:
    target: HistoryPoint
    trajectory: OpenLoopTrajectory
    collision_free: bool
    reachable: bool
    weight_iters_used: int
    cost_to_go: float
    min_margin: float


def obstacle_weight_matrix(vx: float, params: StrategyParams, vehicle: VehicleParams) -> np.ndarray:
    """Diagonal of the headway-scaled ellipse weight (only s and ey act)."""
    ds = vehicle.length + vx * params.t_safe + params.s_safe
    dey = vehicle.width + params.s_safe
    return np.array([0.0, 0.0, 0.0, 0.0, ds**-2, dey**-2])


def obstacle_barrier(x_k, x_obs_k, p_diag) -> float:
    """Ellipse clearance constraint value; feasible (outside) iff f < 0."""
    diff = np.asarray(x_k, dtype=float) - np.asarray(x_obs_k, dtype=float)
    return 1.0 - float(diff @ (np.asarray(p_diag) * diff))


def safe_boundary_clear(states, obstacle_predictions, vehicle: VehicleParams,
                        length: float) -> bool:
    """True iff every horizon step clears every obstacle's planar margin."""
    return min_safety_margin(states, obstacle_predictions, vehicle, length) > 0.0


def min_safety_margin(states, obstacle_predictions, vehicle: VehicleParams,
                      length: float) -> float:
    """Smallest planar margin over steps 1..N and all obstacles (inf if none)."""
    obs = np.asarray(obstacle_predictions, dtype=float)
    if obs.size == 0:
        return float("inf")
    margins = _pairwise_margins(states, obs, vehicle, length)
    return float(margins.min())


def _pairwise_margins(states, obs, vehicle, length):
    xs = np.asarray(states, dtype=float)
    n = xs.shape[0] - 1
    ds = _wrapped_diff(xs[1 : n + 1, S] - obs[:, 1 : n + 1, S], length)
    dey = xs[1 : n + 1, EY] - obs[:, 1 : n + 1, EY]
    return ds * ds + dey * dey - vehicle.length**2 - vehicle.width**2


def safety_slack(states, obstacle_predictions, vehicle: VehicleParams,
                 length: float, margin_static: float, margin_rate: float) -> float:
    """Worst margin surplus over a speed-scaled planning buffer.

    Plans may follow at matched speed with only the static buffer, while
    fast approaches must keep clearance proportional to the closing rate,
    which is where one-step model error accumulates.
    """
    obs = np.asarray(obstacle_predictions, dtype=float)
    if obs.size == 0:
        return float("inf")
    xs = np.asarray(states, dtype=float)
    n = xs.shape[0] - 1
    margins = _pairwise_margins(states, obs, vehicle, length)
    rel_v = np.abs(xs[1 : n + 1, VX] - obs[:, 1 : n + 1, VX])
    return float((margins - margin_static - margin_rate * rel_v).min())


def within_overtaking_range(ego_state, obstacle_state, params: StrategyParams,
                            vehicle: VehicleParams, length: float) -> bool:
    """Longitudinal window in which an obstacle is a live overtaking concern."""
    ds = float(_wrapped_diff(obstacle_state[S] - ego_state[S], length))
    dv = abs(float(ego_state[VX]) - float(obstacle_state[VX]))
    lo = -params.eps_margin * vehicle.length
    hi = params.eps_margin * vehicle.length + params.gamma_pred * dv
    return lo <= ds <= hi


def check_reachability(traj: OpenLoopTrajectory, z_g, prev_terminal,
                       obstacles_present: bool, params: StrategyParams) -> bool:
    """Terminal-tracking test with a convergence-ratio fallback.

    A candidate is reachable when its terminal lands within the tracking
    bound of the target; failing that, it still qualifies when its terminal
    has converged relative to the previous planning round's solution.  With
    no obstacles the convergence bound is zero, which disables the fallback
    and keeps lap-time learning strict.
    """
    eps = params.eps2 if obstacles_present else params.eps1
    err = traj.states[-1] - np.asarray(z_g, dtype=float)
    if float(err @ err) < eps:
        return True
    if prev_terminal is None:
        return False
    psi = params.psi2 if obstacles_present else params.psi1
    prev = np.asarray(prev_terminal, dtype=float)
    diff = prev - traj.states[-1]
    denom = float(prev @ prev)
    if denom <= 0.0:
        return False
    return float(diff @ diff) / denom < psi


def _obstacle_barrier_term(obs_pred, ref_states, q1, q2, params, vehicle, length):
    """Ellipse barrier over steps 1..N, centered on the predicted obstacle.

    Obstacle arc lengths are re-expressed in the reference trajectory's
    unwrapped frame; the headway weight uses the reference speed per step.
    """
    n = ref_states.shape[0] - 1
    steps = np.arange(1, n + 1)
    ref_s = ref_states[steps, S]
    centers = np.column_stack(
        [ref_s + _wrapped_diff(obs_pred[steps, S] - ref_s, length), obs_pred[steps, EY]]
    )
    ds = vehicle.length + ref_states[steps, VX] * params.t_safe + params.s_safe
    dey = vehicle.width + params.s_safe
    weights = np.column_stack([ds**-2, np.full(n, dey**-2)])
    return QuadraticBarrier(
        q1, q2, steps,
        indices=np.array([S, EY]),
        centers=centers,
        weights=weights,
        radius=np.ones(n),
    )


def _bound_barriers(params: StrategyParams, vehicle: VehicleParams, width: float):
    ey_lim = width / 2.0 - vehicle.width / 2.0
    q1 = getattr(params, "q1_bounds", params.q1)
    out = input_box_barriers(
        vehicle.a_max, vehicle.delta_max, params.horizon, params.q1, params.q2_bounds
    )
    out += state_bound_barriers(
        EY, -ey_lim, ey_lim, params.horizon, q1=q1, q2=params.q2_bounds
    )
    out += state_bound_barriers(
        VX, vehicle.v_min, vehicle.v_max, params.horizon, q1=q1, q2=params.q2_bounds
    )
    return out


def solve_candidate(
    target: HistoryPoint,
    x_t: np.ndarray,
    model: ATVModel,
    obstacle_predictions: np.ndarray,
    ref_states: np.ndarray,
    warm_inputs: np.ndarray,
    u_prev: np.ndarray,
    bound_barriers: list,
    params: StrategyParams,
    vehicle: VehicleParams,
    length: float,
    prev_terminal: np.ndarray | None = None,
) -> CandidateSolution:
    """Adaptive-weight barrier-iLQR solve for one terminal target.

    Re-solves with relaxed tracking weights and a sharper obstacle barrier
    until the open-loop trajectory clears the planar safety margin or the
    iteration cap is reached.  Solver failures mark the candidate
    infeasible instead of aborting the control step.
    """
    qn = np.array(params.qn_base, dtype=float)
    r = np.array(params.r_base, dtype=float)
    dr = np.array(params.dr_base, dtype=float)
    q2_obs = params.q2_obstacle
    obstacles_present = obstacle_predictions.shape[0] > 0

    traj = None
    clear = False
    iters_used = 0
    warm = warm_inputs
    for iters_used in range(1, params.max_weight_iters + 1):
        barriers = list(bound_barriers)
        for obs in obstacle_predictions:
            barriers.append(
                _obstacle_barrier_term(obs, ref_states, params.q1_obstacle, q2_obs,
                                       params, vehicle, length)
            )
        spec = CostSpec(target.state, qn, r, dr, u_prev, barriers)
        try:
            traj = solve(model, spec, x_t, warm_start=warm,
                         max_iters=params.max_ilqr_iters, tol=params.ilqr_tol)
        except Exception:  # degenerate solve: infeasible candidate, keep going
            margin = -float("inf")
            empty = OpenLoopTrajectory(
                rollout(model, x_t, warm), warm.copy(), float("inf"), 0, False
            )
            return CandidateSolution(target, empty, False, False, iters_used,
                                     target.cost_to_go, margin)
        margin = safety_slack(traj.states, obstacle_predictions, vehicle, length,
                              params.margin_static, params.margin_rate)
        clear = margin > 0.0
        if clear or iters_used == params.max_weight_iters:
            break
        if margin < -0.5:
            # physical overlap: weight adaptation cannot rescue this target
            break
        qn = qn / params.m_qn
        r = r / params.m_r
        dr = dr / params.m_dr
        q2_obs = q2_obs * (1.0 + params.m_q2)
        warm = traj.inputs

    reachable = check_reachability(traj, target.state, prev_terminal,
                                   obstacles_present, params)
    return CandidateSolution(target, traj, clear, reachable, iters_used,
                             target.cost_to_go, margin)


def select_candidate(solutions: dict[int, CandidateSolution]):
    """Deterministic reduction shared by both modes.

    Feasible candidates are keyed by (cost_to_go, trajectory cost, query
    order); with none feasible, the collision-free candidate with the
    largest worst-case margin is chosen; with none collision-free the
    caller falls back to braking.
    """
    feasible = {
        i: c for i, c in solutions.items() if c.collision_free and c.reachable
    }
    if feasible:
        i = min(feasible, key=lambda j: (feasible[j].cost_to_go,
                                         feasible[j].trajectory.cost, j))
        return i, feasible[i], "feasible"
    clear = {i: c for i, c in solutions.items() if c.collision_free}
    if clear:
        # no candidate is both clear and reachable: progress still matters
        # more than raw clearance, so keep the ascending cost-to-go order
        # and break ties toward the larger margin
        i = min(clear, key=lambda j: (clear[j].cost_to_go, -clear[j].min_margin, j))
        return i, clear[i], "clear_fallback"
    return -1, None, "brake"


def control_step(
    x_t: np.ndarray,
    memory: LapMemory,
    obstacle_predictions: np.ndarray,
    model: ATVModel,
    ref_states: np.ndarray,
    warm_inputs: np.ndarray,
    u_prev: np.ndarray,
    params: StrategyParams,
    vehicle: VehicleParams,
    track: trk.TrackLayout,
    bound_barriers: list | None = None,
    executor: ThreadPoolExecutor | None = None,
    prev_terminal: np.ndarray | None = None,
):
    """One planning step: target set, per-candidate solves, selection.

    Returns (input, diagnostics).  ``obstacle_predictions`` holds all
    obstacles; barriers are attached only for those inside the overtaking
    range or within the horizon's longitudinal reach.
    """
    length = track.total_length
    # candidates live around where the horizon can END, not around x_t:
    # querying at the reference terminal state keeps targets ahead of the
    # car instead of pinning it to its own past pace
    neighbors = memory.knn_query(ref_states[-1], params.k_neighbors,
                                 np.asarray(params.dz), params.lap_window)
    if not neighbors:
        raise RuntimeError("empty target set")

    in_scope = _gate_obstacles(x_t, obstacle_predictions, params, vehicle, length)
    if bound_barriers is None:
        bound_barriers = _bound_barriers(params, vehicle, track.width)

    def solve_one(target):
        return solve_candidate(
            target, x_t, model, in_scope, ref_states, warm_inputs, u_prev,
            bound_barriers, params, vehicle, length, prev_terminal,
        )

    solutions: dict[int, CandidateSolution] = {}
    if params.mode == "parallel":
        if executor is None:
            results = list(map(solve_one, neighbors))
        else:
            results = list(executor.map(solve_one, neighbors))
        solutions = dict(enumerate(results))
    else:
        best_j = None
        for i, target in enumerate(neighbors):
            if best_j is not None and target.cost_to_go > best_j:
                break
            cand = solve_one(target)
            solutions[i] = cand
            if best_j is None and cand.collision_free and cand.reachable:
                best_j = cand.cost_to_go  # finish the tie group, then stop

    idx, chosen, outcome = select_candidate(solutions)
    if chosen is None:
        u = np.array([-vehicle.a_max, u_prev[STEER]])
        diag = {
            "cand_index": -1,
            "outcome": outcome,
            "n_solved": len(solutions),
            "weight_iters": max(c.weight_iters_used for c in solutions.values()),
            "predicted_states": None,
            "n_obstacles_in_scope": in_scope.shape[0],
        }
        return u, diag
    u = chosen.trajectory.inputs[0]
    diag = {
        "cand_index": idx,
        "outcome": outcome,
        "n_solved": len(solutions),
        "weight_iters": chosen.weight_iters_used,
        "predicted_states": chosen.trajectory.states,
        "chosen": chosen,
        "n_obstacles_in_scope": in_scope.shape[0],
    }
    return u, diag


def _gate_obstacles(x_t, predictions, params, vehicle, length):
    """Obstacles that get barriers: overtaking range or horizon reach."""
    preds = np.asarray(predictions, dtype=float)
    if preds.size == 0:
        return preds.reshape(0, preds.shape[1] if preds.ndim > 1 else 0, 6)
    reach = params.horizon * DT_CONTROL * (abs(float(x_t[VX])) + vehicle.v_max)
    keep = []
    for i in range(preds.shape[0]):
        if within_overtaking_range(x_t, preds[i, 0], params, vehicle, length):
            keep.append(i)
            continue
        ds = np.abs(_wrapped_diff(preds[i, :, S] - x_t[S], length))
        if np.any(ds <= reach):
            keep.append(i)
    return preds[keep]


def _trajectory_in_envelope(states, vehicle, width) -> bool:
    """Reject reference trajectories outside any physically plausible box."""
    return bool(
        states[:, VX].min() > vehicle.v_min - 0.5
        and states[:, VX].max() < vehicle.v_max + 0.5
        and np.abs(states[:, 1]).max() < 2.0
        and np.abs(states[:, 2]).max() < 8.0
        and np.abs(states[:, EY]).max() < width
    )


class RacingController:
    """Stateful wrapper running the strategy as an episode-engine callback."""

    def __init__(self, track: trk.TrackLayout, vehicle: VehicleParams,
                 params: StrategyParams | None = None):
        self.track = track
        self.vehicle = vehicle
        self.params = params or StrategyParams()
        self.horizon = self.params.horizon
        self.u_prev = np.zeros(2)
        self.prev_states: np.ndarray | None = None
        self.prev_inputs: np.ndarray | None = None
        self._bound_barriers = _bound_barriers(self.params, vehicle, track.width)
        self._executor = (
            ThreadPoolExecutor(max_workers=self.params.parallel_workers)
            if self.params.mode == "parallel"
            else None
        )

    def reset(self):
        self.u_prev = np.zeros(2)
        self.prev_states = None
        self.prev_inputs = None

    def _reference(self, x_t):
        """Shifted previous solution, or a hold-still seed on a cold start."""
        n = self.params.horizon
        sane = (
            self.prev_states is not None
            and np.all(np.isfinite(self.prev_states))
            and float(np.sum((self.prev_states[1] - x_t) ** 2)) <= 1.0
            and _trajectory_in_envelope(self.prev_states, self.vehicle,
                                        self.track.width)
        )
        if not sane:
            ref = np.tile(x_t, (n + 1, 1))
            warm = np.zeros((n, 2))
            return ref, warm
        ref = np.vstack([self.prev_states[1:], self.prev_states[-1]])
        warm = np.vstack([self.prev_inputs[1:], self.prev_inputs[-1]])
        # re-center after a lap wrap so the reference tracks the query frame
        offset = round((ref[0, S] - x_t[S]) / self.track.total_length)
        if offset:
            ref = ref.copy()
            ref[:, S] -= offset * self.track.total_length
        return ref, warm

    def __call__(self, x, step, predictions, memory):
        t0 = time.perf_counter()
        ref_states, warm_inputs = self._reference(x)
        model = fit_atv_model(
            memory.transitions(self.params.lap_window),
            (ref_states[: self.params.horizon], warm_inputs),
            self.track,
            self.vehicle,
            DT_CONTROL,
            DT_SIM,
            self.params.n_reg,
        )
        warm_states = rollout(model, x, warm_inputs)
        prev_terminal = None if self.prev_states is None else self.prev_states[-1]
        u, diag = control_step(
            x, memory, predictions, model, warm_states, warm_inputs,
            self.u_prev, self.params, self.vehicle, self.track,
            self._bound_barriers, self._executor, prev_terminal,
        )
        diag["solve_time"] = time.perf_counter() - t0
        if diag.get("predicted_states") is not None:
            self.prev_states = diag["predicted_states"]
            self.prev_inputs = diag["chosen"].trajectory.inputs
        self.u_prev = np.array(
            [np.clip(u[ACC], -self.vehicle.a_max, self.vehicle.a_max),
             np.clip(u[STEER], -self.vehicle.delta_max, self.vehicle.delta_max)]
        )
        return self.u_prev.copy(), diag
