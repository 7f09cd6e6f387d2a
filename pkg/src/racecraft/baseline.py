"""Slacked-target-state learning-MPC baseline.

Shares the lap memory, target-set query, and barrier-iLQR machinery with
the racing strategy, but solves each candidate once with fixed weights: the
terminal constraint is softened into a quadratic slack penalty (the slack
eliminated analytically, leaving a plain terminal cost), and obstacle
avoidance enters through discrete barrier-function decay conditions instead
of headway ellipses.  Candidates are tried in ascending cost-to-go order
and the first collision-free trajectory is executed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import track as trk
from .ilqr import CostSpec, OpenLoopTrajectory, QuadraticBarrier, rollout, solve
from .memory import LapMemory
from .simulation import DT_CONTROL, DT_SIM, _wrapped_diff
from .strategy import (
    CandidateSolution,
    _bound_barriers,
    _gate_obstacles,
    _trajectory_in_envelope,
    safety_slack,
)
from .vehicle import ACC, EY, S, STEER, VX, VehicleParams, fit_atv_model


@dataclass
class BaselineParams:
    """Fixed-weight baseline tuning; shares the strategy's shared knobs."""

    k_neighbors: int = 32
    horizon: int = 12
    q_slack: tuple = (50.0, 50.0, 50.0, 50.0, 500.0, 500.0)
    r_base: tuple = (1.0, 10.0)
    dr_base: tuple = (5.0, 50.0)
    gamma_cbf: float = 0.6
    omega: float = 1.0
    q1: float = 1.0
    q1_obstacle: float = 5.0
    q1_bounds: float = 50.0
    q2_obstacle: float = 2.5
    q2_bounds: float = 10.0
    margin_static: float = 0.01
    margin_rate: float = 0.08
    eps_margin: float = 5.0
    gamma_pred: float = 2.0
    s_safe: float = 0.1
    t_safe: float = 2.0
    eps1: float = 0.4
    eps2: float = 1.0
    psi1: float = 0.0
    psi2: float = 0.03
    max_weight_iters: int = 2  # unused: weights stay fixed; kept for config parity
    dz: tuple = (0.1, 0.1, 0.1, 0.1, 1.0, 1.0)
    lap_window: int = 2
    n_reg: int = 40
    max_ilqr_iters: int = 25
    ilqr_tol: float = 1e-6
    mode: str = "sequential"
    parallel_workers: int = 4

    def __post_init__(self):
        if not 0.0 <= self.gamma_cbf < 1.0:
            raise ValueError("gamma_cbf must lie in [0, 1)")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if np.any(np.asarray(self.q_slack) <= 0):
            raise ValueError("slack weight must be positive definite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "BaselineParams":
        doc = json.loads(text)
        for key in ("q_slack", "r_base", "dr_base", "dz"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return BaselineParams(**doc)


def dcbf_transform(b_k: float, b_k1: float, gamma_cbf: float, omega_k: float) -> float:
    """Decay condition on consecutive safety margins.

    Returns f = gamma*omega*b_k - b_{k+1}; feasible (f <= 0) iff the next
    margin retains at least the prescribed fraction of the current one.
    """
    return gamma_cbf * omega_k * b_k - b_k1


def cost_to_go_vector(points) -> np.ndarray:
    """Stored cost-to-go of the queried points, in query order."""
    return np.array([pt.cost_to_go for pt in points], dtype=float)


def _dcbf_barrier_term(obs_pred, ref_states, params: BaselineParams,
                       vehicle: VehicleParams, length: float) -> QuadraticBarrier:
    """Barrier-function decay constraints along the horizon for one obstacle.

    The margin b is the planar safety boundary; the decay condition at step
    k+1 requires b(x_{k+1}) >= gamma*omega*b_k, with b_k taken from the
    measured state at k=0 and from the seed trajectory afterwards, which
    keeps the per-step cost separable for the solver.
    """
    n = ref_states.shape[0] - 1
    steps = np.arange(1, n + 1)
    ref_s = ref_states[:, S]
    centers_s = ref_s[steps] + _wrapped_diff(obs_pred[steps, S] - ref_s[steps], length)
    centers = np.column_stack([centers_s, obs_pred[steps, EY]])
    margin_floor = vehicle.length**2 + vehicle.width**2

    ds_prev = _wrapped_diff(ref_states[:n, S] - obs_pred[:n, S], length)
    dey_prev = ref_states[:n, EY] - obs_pred[:n, EY]
    b_prev = ds_prev * ds_prev + dey_prev * dey_prev - margin_floor
    # f = gamma*omega*b_k - b_{k+1} <= 0 rewritten as
    # radius_k - ((ds)^2 + (dey)^2) <= 0 with radius folding in the floor
    radius = params.gamma_cbf * params.omega * b_prev + margin_floor
    weights = np.ones((n, 2))
    return QuadraticBarrier(
        params.q1_obstacle, params.q2_obstacle, steps,
        indices=np.array([S, EY]),
        centers=centers,
        weights=weights,
        radius=radius,
    )


def baseline_control_step(
    x_t: np.ndarray,
    memory: LapMemory,
    obstacle_predictions: np.ndarray,
    model,
    ref_states: np.ndarray,
    warm_inputs: np.ndarray,
    u_prev: np.ndarray,
    params: BaselineParams,
    vehicle: VehicleParams,
    track: trk.TrackLayout,
    bound_barriers: list | None = None,
):
    """Fixed-weight candidate loop: first collision-free trajectory wins."""
    length = track.total_length
    neighbors = memory.knn_query(ref_states[-1], params.k_neighbors,
                                 np.asarray(params.dz), params.lap_window)
    in_scope = _gate_obstacles(x_t, obstacle_predictions, params, vehicle, length)
    if bound_barriers is None:
        bound_barriers = _bound_barriers(params, vehicle, track.width)
    barriers = list(bound_barriers)
    for obs in in_scope:
        barriers.append(_dcbf_barrier_term(obs, ref_states, params, vehicle, length))

    qn = np.array(params.q_slack, dtype=float)
    r = np.array(params.r_base, dtype=float)
    dr = np.array(params.dr_base, dtype=float)

    solutions: dict[int, CandidateSolution] = {}
    chosen = None
    idx = -1
    for i, target in enumerate(neighbors):
        spec = CostSpec(target.state, qn, r, dr, u_prev, barriers)
        try:
            traj = solve(model, spec, x_t, warm_start=warm_inputs,
                         max_iters=params.max_ilqr_iters, tol=params.ilqr_tol)
        except Exception:
            continue
        margin = safety_slack(traj.states, in_scope, vehicle, length,
                              params.margin_static, params.margin_rate)
        clear = margin > 0.0
        solutions[i] = CandidateSolution(target, traj, clear, True, 1,
                                         target.cost_to_go, margin)
        if clear:
            chosen = solutions[i]
            idx = i
            break

    if chosen is None:
        u = np.array([-vehicle.a_max, u_prev[STEER]])
        return u, {
            "cand_index": -1,
            "outcome": "brake",
            "n_solved": len(solutions),
            "weight_iters": 1,
            "predicted_states": None,
            "n_obstacles_in_scope": in_scope.shape[0],
        }
    u = chosen.trajectory.inputs[0]
    return u, {
        "cand_index": idx,
        "outcome": "feasible",
        "n_solved": len(solutions),
        "weight_iters": 1,
        "predicted_states": chosen.trajectory.states,
        "chosen": chosen,
        "n_obstacles_in_scope": in_scope.shape[0],
    }


class BaselineController:
    """Episode-engine callback wrapper around the baseline control step."""

    def __init__(self, track: trk.TrackLayout, vehicle: VehicleParams,
                 params: BaselineParams | None = None):
        self.track = track
        self.vehicle = vehicle
        self.params = params or BaselineParams()
        self.horizon = self.params.horizon
        self.u_prev = np.zeros(2)
        self.prev_states: np.ndarray | None = None
        self.prev_inputs: np.ndarray | None = None
        self._bound_barriers = _bound_barriers(self.params, vehicle, track.width)

    def reset(self):
        self.u_prev = np.zeros(2)
        self.prev_states = None
        self.prev_inputs = None

    def _reference(self, x_t):
        n = self.params.horizon
        sane = (
            self.prev_states is not None
            and np.all(np.isfinite(self.prev_states))
            and float(np.sum((self.prev_states[1] - x_t) ** 2)) <= 1.0
            and _trajectory_in_envelope(self.prev_states, self.vehicle,
                                        self.track.width)
        )
        if not sane:
            return np.tile(x_t, (n + 1, 1)), np.zeros((n, 2))
        ref = np.vstack([self.prev_states[1:], self.prev_states[-1]])
        warm = np.vstack([self.prev_inputs[1:], self.prev_inputs[-1]])
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
        u, diag = baseline_control_step(
            x, memory, predictions, model, warm_states, warm_inputs,
            self.u_prev, self.params, self.vehicle, self.track,
            self._bound_barriers,
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
