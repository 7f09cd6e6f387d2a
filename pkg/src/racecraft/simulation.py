"""Multi-vehicle episode engine.

Surrounding vehicles are PID-driven toward randomized lateral/velocity
targets and their trajectories are rolled out once, up front, at the 1 kHz
simulation rate; an episode then replays those fixed trajectories while the
ego controller runs at the 10 Hz control period.  Identical seeds produce
bit-identical scenarios and episodes, which is what makes paired
strategy-vs-baseline comparisons meaningful.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import track as trk
from .memory import LapMemory
from .vehicle import EY, S, VX, VehicleParams, clamp_input, simulate_interval

DT_CONTROL = 0.1
DT_SIM = 1e-3

SPEED_INTERVALS = {
    "v1": (0.2, 0.4),
    "v2": (0.4, 0.6),
    "v3": (0.6, 0.8),
}

# prediction horizons the engine must keep pre-generated beyond the time cap
HORIZON_PAD = 16


class PredictionHorizonError(IndexError):
    """Requested obstacle predictions beyond the pre-generated range."""


class SpawnError(RuntimeError):
    """Could not draw non-overlapping spawn positions."""


# --- randomized target schedules -------------------------------------------


def lateral_target_schedule(rng, n_steps: int, clamp_abs: float) -> np.ndarray:
    """Piecewise-constant lateral target: slow random walk plus fast jitter.

    The slow component starts U(-0.7, 0.7) and steps by U(-0.2, 0.2) every
    12 control steps; the fast component starts U(-0.15, 0.15) and steps by
    U(-0.1, 0.1) every 6.  The emitted sum is clamped to |d| <= clamp_abs.
    """
    d_low = rng.uniform(-0.7, 0.7)
    d_high = rng.uniform(-0.15, 0.15)
    out = np.empty(n_steps)
    for t in range(n_steps):
        if t > 0 and t % 12 == 0:
            d_low += rng.uniform(-0.2, 0.2)
        if t > 0 and t % 6 == 0:
            d_high += rng.uniform(-0.1, 0.1)
        out[t] = min(max(d_low + d_high, -clamp_abs), clamp_abs)
    return out


def velocity_target_schedule(rng, n_steps: int, interval: tuple[float, float]) -> np.ndarray:
    """Velocity target redrawn from the interval every 12 control steps."""
    lo, hi = interval
    out = np.empty(n_steps)
    v = rng.uniform(lo, hi)
    for t in range(n_steps):
        if t > 0 and t % 12 == 0:
            v = rng.uniform(lo, hi)
        out[t] = v
    return out


# --- PID --------------------------------------------------------------------


@dataclass(frozen=True)
class PidGains:
    kp_v: float = 2.0
    kp_d: float = 1.2
    kd_d: float = 0.3
    k_psi: float = 1.0

    def __post_init__(self):
        if min(self.kp_v, self.kp_d, self.kd_d, self.k_psi) <= 0:
            raise ValueError("PID gains must be positive")


def pid_control(x, v_target, d_target, gains: PidGains, p: VehicleParams):
    """Track a velocity and lateral-offset target; broadcasts over vehicles."""
    x = np.asarray(x, dtype=float)
    ey_dot = x[..., VX] * np.sin(x[..., 3]) + x[..., 1] * np.cos(x[..., 3])
    a = gains.kp_v * (np.asarray(v_target) - x[..., VX])
    delta = (
        -gains.kp_d * (x[..., EY] - np.asarray(d_target))
        - gains.kd_d * ey_dot
        - gains.k_psi * x[..., 3]
    )
    u = np.stack([a, delta], axis=-1)
    return clamp_input(u, p)


# --- scenarios ---------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    track_shape: str = "m_shape"
    track_length: float = 51.0
    track_width: float = 2.0
    n_obstacles: int = 9
    speed_interval: str = "v1"
    seed: int = 0
    max_sim_time: float = 110.0
    spawn_range: tuple[float, float] = (5.0, 40.0)

    def __post_init__(self):
        if self.n_obstacles < 0:
            raise ValueError("n_obstacles must be nonnegative")
        if self.max_sim_time <= 0:
            raise ValueError("max_sim_time must be positive")
        if self.speed_interval not in SPEED_INTERVALS:
            raise ValueError(f"unknown speed interval {self.speed_interval!r}")
        lo, hi = self.spawn_range
        if not (0 <= lo < hi < self.track_length):
            raise ValueError("spawn_range must lie inside [0, L)")

    def to_json(self) -> str:
        doc = dict(self.__dict__)
        doc["spawn_range"] = list(self.spawn_range)
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "ScenarioConfig":
        doc = json.loads(text)
        doc["spawn_range"] = tuple(doc["spawn_range"])
        return ScenarioConfig(**doc)


@dataclass
class Scenario:
    """Track plus fixed obstacle trajectories sampled at the control period.

    ``trajectories`` has shape (n_obstacles, n_samples, 6) with the arc
    length stored unwrapped (a monotone odometer), so overtake accounting
    and wrapped on-track positions are both recoverable.
    """

    config: ScenarioConfig
    track: trk.TrackLayout
    trajectories: np.ndarray
    spawn_s: np.ndarray

    @property
    def n_control_steps(self) -> int:
        return int(round(self.config.max_sim_time / DT_CONTROL))


def _wrapped_diff(ds, length):
    """Signed circular difference mapped to [-L/2, L/2)."""
    return (np.asarray(ds) + 0.5 * length) % length - 0.5 * length


def pairwise_clear(s_positions, ey_positions, p: VehicleParams, length: float) -> bool:
    """True when every vehicle pair satisfies the planar safety margin."""
    n = len(s_positions)
    for i in range(n):
        for j in range(i + 1, n):
            ds = _wrapped_diff(s_positions[i] - s_positions[j], length)
            dey = ey_positions[i] - ey_positions[j]
            if ds * ds + dey * dey - p.length**2 - p.width**2 <= 0:
                return False
    return True


def make_scenario(
    config: ScenarioConfig,
    vehicle: VehicleParams | None = None,
    gains: PidGains | None = None,
) -> Scenario:
    """Build the track and pre-generate all obstacle trajectories."""
    vehicle = vehicle or VehicleParams()
    gains = gains or PidGains()
    track = trk.build_track(config.track_shape, config.track_length, config.track_width)
    n_steps = int(round(config.max_sim_time / DT_CONTROL)) + HORIZON_PAD
    n_obs = config.n_obstacles
    clamp_abs = config.track_width / 2.0 - vehicle.width / 2.0 - 0.1

    d_scheds = np.zeros((n_obs, n_steps))
    v_scheds = np.zeros((n_obs, n_steps))
    for i in range(n_obs):
        rng_i = np.random.default_rng([config.seed, 1, i])
        d_scheds[i] = lateral_target_schedule(rng_i, n_steps, clamp_abs)
        v_scheds[i] = velocity_target_schedule(
            rng_i, n_steps, SPEED_INTERVALS[config.speed_interval]
        )

    spawn_rng = np.random.default_rng([config.seed, 0])
    spawn_s = np.empty(0)
    if n_obs > 0:
        lo, hi = config.spawn_range
        for _ in range(100):
            spawn_s = spawn_rng.uniform(lo, hi, size=n_obs)
            if pairwise_clear(spawn_s, d_scheds[:, 0], vehicle, track.total_length):
                break
        else:
            raise SpawnError("no collision-free spawn after 100 draws")

    traj = np.zeros((n_obs, n_steps + 1, 6))
    if n_obs > 0:
        x = np.zeros((n_obs, 6))
        x[:, VX] = v_scheds[:, 0]
        x[:, S] = spawn_s
        x[:, EY] = d_scheds[:, 0]
        traj[:, 0] = x
        for step in range(n_steps):
            u = pid_control(x, v_scheds[:, step], d_scheds[:, step], gains, vehicle)
            x = simulate_interval(x, u, track, vehicle, DT_CONTROL, DT_SIM)
            traj[:, step + 1] = x
    return Scenario(config, track, traj, spawn_s)


def predict_obstacles(scenario: Scenario, t: int, n_horizon: int) -> np.ndarray:
    """Exact (n_obstacles, N+1, 6) slice of the pre-generated trajectories.

    Row k is the obstacle state at control step t+k; prediction is an
    oracle because the trajectories are fixed in advance.
    """
    if t < 0 or t + n_horizon >= scenario.trajectories.shape[1]:
        raise PredictionHorizonError(
            f"steps [{t}, {t + n_horizon}] outside pre-generated range"
        )
    return scenario.trajectories[:, t : t + n_horizon + 1].copy()


# --- episode engine -----------------------------------------------------------


@dataclass
class EpisodeLog:
    """Per-control-step record of one ego lap among the obstacles."""

    n_obstacles: int
    dt: float = DT_CONTROL
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    ego_states: list = field(default_factory=list)
    ego_inputs: list = field(default_factory=list)
    obstacle_states: list = field(default_factory=list)  # (n_obs, 6) per step
    cand_index: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    weight_iters: list = field(default_factory=list)
    overtaking: list = field(default_factory=list)
    collision: list = field(default_factory=list)
    boundary: list = field(default_factory=list)
    predictions: list = field(default_factory=list)  # optional (N+1, 6) per step
    collision_events: list = field(default_factory=list)  # (step, obstacle)
    boundary_events: list = field(default_factory=list)
    lap_steps: int | None = None
    completed: bool = False
    aborted_reason: str | None = None

    @property
    def lap_time(self) -> float | None:
        return None if self.lap_steps is None else self.lap_steps * self.dt

    def summary(self, scenario: Scenario | None = None, vehicle: VehicleParams | None = None) -> dict:
        solve = [t for t in self.solve_time if t is not None]
        over = [
            t
            for t, flag in zip(self.solve_time, self.overtaking)
            if flag and t is not None
        ]
        out = {
            "completed": self.completed,
            "lap_time": self.lap_time,
            "collisions": len(self.collision_events),
            "boundary_violations": len(self.boundary_events),
            "mean_solve_time": float(np.mean(solve)) if solve else None,
            "mean_overtaking_solve_time": float(np.mean(over)) if over else None,
            "aborted_reason": self.aborted_reason,
        }
        if scenario is not None and vehicle is not None:
            overtaken = count_overtaken(self, scenario, vehicle)
            out["overtaken"] = overtaken
            # success: all vehicles passed within the track by the finish
            # line, without safety failures
            out["success"] = bool(
                self.completed
                and overtaken == scenario.config.n_obstacles
                and not self.collision_events
                and not self.boundary_events
            )
        return out

    CSV_META = ["step", "time", "cand_index", "solve_time", "weight_iters",
                "overtaking", "collision", "boundary"]
    CSV_EGO = ["vx", "vy", "wz", "epsi", "s", "ey", "a", "delta"]

    def csv_header(self) -> list[str]:
        cols = self.CSV_META + self.CSV_EGO
        for i in range(self.n_obstacles):
            cols += [f"obs{i}_{f}" for f in ("vx", "vy", "wz", "epsi", "s", "ey")]
        return cols

    def to_csv(self, path_or_buf, timestamp: str | None = None) -> None:
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            if timestamp is not None:
                fh.write(f"# generated {timestamp}\n")
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            for i in range(len(self.steps)):
                row = [
                    self.steps[i],
                    repr(float(self.times[i])),
                    self.cand_index[i],
                    "" if self.solve_time[i] is None else repr(float(self.solve_time[i])),
                    self.weight_iters[i],
                    int(self.overtaking[i]),
                    int(self.collision[i]),
                    int(self.boundary[i]),
                ]
                row += [repr(float(v)) for v in self.ego_states[i]]
                row += [repr(float(v)) for v in self.ego_inputs[i]]
                row += [repr(float(v)) for v in np.asarray(self.obstacle_states[i]).ravel()]
                writer.writerow(row)
        finally:
            if own:
                fh.close()

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def count_overtaken(log: EpisodeLog, scenario: Scenario, vehicle: VehicleParams) -> int:
    """Obstacles whose cumulative progress trails the ego's by >= one car length."""
    if not log.steps or scenario.config.n_obstacles == 0:
        return 0
    last = len(log.steps) - 1
    ego_s = log.ego_states[last][S]
    obs_s = np.asarray(log.obstacle_states[last])[:, S]
    return int(np.count_nonzero(ego_s - obs_s >= vehicle.length))


def eq10_margins(ego_state, obstacle_states, vehicle: VehicleParams, length: float):
    """Planar safety margins of the ego against each obstacle (positive = clear)."""
    obs = np.asarray(obstacle_states, dtype=float)
    ds = _wrapped_diff(ego_state[S] - obs[:, S], length)
    dey = ego_state[EY] - obs[:, EY]
    return ds * ds + dey * dey - vehicle.length**2 - vehicle.width**2


def overtaking_phase(ego_state, obstacle_states, vehicle: VehicleParams, length: float,
                     eps_margin: float, gamma_pred: float) -> bool:
    """True when any obstacle is inside the ego's overtaking range."""
    obs = np.asarray(obstacle_states, dtype=float)
    if obs.size == 0:
        return False
    ds = _wrapped_diff(obs[:, S] - ego_state[S], length)
    hi = eps_margin * vehicle.length + gamma_pred * np.abs(ego_state[VX] - obs[:, VX])
    return bool(np.any((-eps_margin * vehicle.length <= ds) & (ds <= hi)))


def run_episode(
    scenario: Scenario,
    controller,
    vehicle: VehicleParams | None = None,
    memory: LapMemory | None = None,
    horizon: int = 12,
    ego_start: np.ndarray | None = None,
    keep_predictions: bool = False,
) -> EpisodeLog:
    """Drive the ego for one lap (or until the time cap) among the obstacles.

    ``controller(x, step, predictions, memory) -> (u, diagnostics)`` runs at
    the control period; the ego integrates at the simulation rate between
    calls.  Collision events are planar-margin violations at executed
    states; boundary events are |ey| > width/2.
    """
    vehicle = vehicle or VehicleParams()
    track = scenario.track
    length = track.total_length
    log = EpisodeLog(scenario.config.n_obstacles)
    x = np.zeros(6) if ego_start is None else np.array(ego_start, dtype=float)
    n_steps = scenario.n_control_steps

    lap_index = None
    if memory is not None:
        lap_index = memory.start_lap()

    def obstacles_at(step):
        if scenario.config.n_obstacles == 0:
            return np.zeros((0, 6))
        return scenario.trajectories[:, step]

    def record_events(step, state):
        obs = obstacles_at(step)
        margins = eq10_margins(state, obs, vehicle, length) if len(obs) else np.empty(0)
        hit = False
        for j in np.nonzero(margins <= 0)[0]:
            log.collision_events.append((step, int(j)))
            hit = True
        off = abs(state[EY]) > scenario.config.track_width / 2.0
        if off:
            log.boundary_events.append(step)
        return hit, off

    for i in range(n_steps):
        preds = predict_obstacles(scenario, i, horizon)
        try:
            u, diag = controller(x, i, preds, memory)
        except Exception as exc:  # noqa: BLE001 - controller failure aborts the episode
            log.aborted_reason = f"controller failure at step {i}: {exc!r}"
            break
        u = clamp_input(u, vehicle)
        diag = diag or {}
        if memory is not None:
            memory.record_step(x, u, lap_index, i)

        obs_now = obstacles_at(i)
        hit, off = record_events(i, x)
        log.steps.append(i)
        log.times.append(i * DT_CONTROL)
        log.ego_states.append(x.copy())
        log.ego_inputs.append(u.copy())
        log.obstacle_states.append(np.array(obs_now))
        log.cand_index.append(diag.get("cand_index", -1))
        log.solve_time.append(diag.get("solve_time"))
        log.weight_iters.append(diag.get("weight_iters", 0))
        log.overtaking.append(
            overtaking_phase(x, obs_now, vehicle, length, 5.0, 2.0)
        )
        log.collision.append(hit)
        log.boundary.append(off)
        if keep_predictions:
            log.predictions.append(diag.get("predicted_states"))

        x = simulate_interval(x, u, track, vehicle, DT_CONTROL, DT_SIM)

        if x[S] >= length:
            t_lap = i + 1
            record_events(min(t_lap, n_steps - 1), x)
            if memory is not None:
                memory.record_step(x, u, lap_index, t_lap)
                memory.finalize_lap(t_lap)
                lap_index = None
            log.lap_steps = t_lap
            log.completed = True
            break

    if memory is not None and lap_index is not None:
        memory.abandon_lap()
    return log


def run_laps(
    track: trk.TrackLayout,
    controller,
    memory: LapMemory,
    n_laps: int,
    vehicle: VehicleParams | None = None,
    horizon: int = 12,
    x0: np.ndarray | None = None,
    max_steps_per_lap: int = 5000,
):
    """Continuous obstacle-free laps feeding the lap memory.

    Returns (lap_steps, final_state); each completed lap is finalized into
    ``memory`` as it is crossed, so learning controllers see their own
    recent laps immediately.
    """
    vehicle = vehicle or VehicleParams()
    length = track.total_length
    x = np.zeros(6) if x0 is None else np.array(x0, dtype=float)
    empty_preds = np.zeros((0, horizon + 1, 6))
    lap_steps: list[int] = []
    global_step = 0
    for _ in range(n_laps):
        lap_index = memory.start_lap()
        step = 0
        while step < max_steps_per_lap:
            u, _ = controller(x, global_step, empty_preds, memory)
            u = clamp_input(u, vehicle)
            memory.record_step(x, u, lap_index, step)
            x = simulate_interval(x, u, track, vehicle, DT_CONTROL, DT_SIM)
            step += 1
            global_step += 1
            if x[S] >= length:
                memory.record_step(x, u, lap_index, step)
                memory.finalize_lap(step)
                lap_steps.append(step)
                x[S] -= length
                break
        else:
            memory.abandon_lap()
            raise RuntimeError("lap did not complete within max_steps_per_lap")
    return lap_steps, x


class PidController:
    """Constant-target PID ego controller (warmup laps, baselines for tests)."""

    def __init__(self, v_target: float, d_target: float = 0.0,
                 gains: PidGains | None = None, vehicle: VehicleParams | None = None):
        self.v_target = v_target
        self.d_target = d_target
        self.gains = gains or PidGains()
        self.vehicle = vehicle or VehicleParams()
        self.horizon = 0

    def __call__(self, x, step, predictions, memory):
        return pid_control(x, self.v_target, self.d_target, self.gains, self.vehicle), {}
