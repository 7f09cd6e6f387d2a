import numpy as np
import pytest

from racecraft.memory import LapMemory
from racecraft.simulation import (
    DT_CONTROL,
    EpisodeLog,
    PidController,
    PidGains,
    PredictionHorizonError,
    ScenarioConfig,
    SPEED_INTERVALS,
    count_overtaken,
    eq10_margins,
    lateral_target_schedule,
    make_scenario,
    overtaking_phase,
    pid_control,
    predict_obstacles,
    run_episode,
    run_laps,
    velocity_target_schedule,
)
from racecraft.track import build_track
from racecraft.vehicle import EY, S, VX, VehicleParams


CLAMP = 0.79  # corridor clamp for width 2, vehicle width 0.2


def test_lateral_schedule_initial_draw_and_holds(rng):
    d = lateral_target_schedule(rng, 60, CLAMP)
    # piecewise constant between updates (multiples of 6)
    for t in range(1, 60):
        if t % 6 != 0:
            assert d[t] == d[t - 1]
    assert abs(d[0]) <= 0.7 + 0.15


def test_lateral_schedule_clamped_everywhere(rng):
    d = lateral_target_schedule(rng, 100_000, CLAMP)
    assert np.max(np.abs(d)) <= CLAMP + 1e-12


def test_velocity_schedule_holds_and_ranges(rng):
    v = velocity_target_schedule(rng, 100_000, SPEED_INTERVALS["v1"])
    assert v.min() >= 0.2 and v.max() <= 0.4
    assert v[5] == v[4]
    for t in range(1, 1000):
        if t % 12 != 0:
            assert v[t] == v[t - 1]


def test_velocity_schedule_v2_mean(rng):
    v = velocity_target_schedule(rng, 100_000, SPEED_INTERVALS["v2"])
    resample_points = v[::12]
    assert 0.49 <= float(np.mean(resample_points)) <= 0.51


def test_pid_setpoint_equilibrium(vehicle):
    gains = PidGains()
    x = np.array([0.5, 0.0, 0.0, 0.0, 3.0, 0.2])
    u = pid_control(x, 0.5, 0.2, gains, vehicle)
    assert u[0] == pytest.approx(0.0, abs=1e-12)
    assert u[1] == pytest.approx(0.0, abs=1e-12)
    # sign: target above current speed accelerates
    u = pid_control(x, 0.8, 0.2, gains, vehicle)
    assert u[0] > 0


def test_pid_closed_loop_converges(vehicle):
    # lateral step of schedule-increment size on the opening straight
    track = build_track("l_shape", 51.0, 2.0)
    gains = PidGains()
    x = np.array([0.4, 0.0, 0.0, 0.0, 0.1, -0.05])
    target_d = 0.25
    from racecraft.vehicle import simulate_interval

    for step in range(50):  # 5 s
        u = pid_control(x, 0.4, target_d, gains, vehicle)
        x = simulate_interval(x, u, track, vehicle, DT_CONTROL, 1e-3)
    assert abs(x[EY] - target_d) < 0.05


def test_scenario_determinism(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=4, speed_interval="v1",
                         seed=42, max_sim_time=20.0)
    a = make_scenario(cfg, vehicle)
    b = make_scenario(cfg, vehicle)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert np.array_equal(a.spawn_s, b.spawn_s)


def test_scenario_spawns_inside_range(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=9, speed_interval="v1",
                         seed=3, max_sim_time=10.0)
    sc = make_scenario(cfg, vehicle)
    assert np.all(sc.spawn_s >= 5.0) and np.all(sc.spawn_s <= 40.0)
    # pairwise clear at t=0
    assert eq10_margins(sc.trajectories[0, 0], sc.trajectories[1:, 0], vehicle,
                        sc.track.total_length).min() > 0


def test_scenario_zero_obstacles(vehicle):
    cfg = ScenarioConfig(track_shape="ellipse", n_obstacles=0, speed_interval="v2",
                         seed=1, max_sim_time=5.0)
    sc = make_scenario(cfg, vehicle)
    assert sc.trajectories.shape[0] == 0


def test_obstacles_stay_on_track(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=9, speed_interval="v3",
                         seed=11, max_sim_time=30.0)
    sc = make_scenario(cfg, vehicle)
    assert np.abs(sc.trajectories[:, :, EY]).max() <= sc.config.track_width / 2.0


def test_predictions_are_exact_slices(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=3, speed_interval="v1",
                         seed=5, max_sim_time=10.0)
    sc = make_scenario(cfg, vehicle)
    preds = predict_obstacles(sc, 40, 12)
    assert preds.shape == (3, 13, 6)
    for k in range(13):
        assert np.array_equal(preds[:, k], sc.trajectories[:, 40 + k])
    with pytest.raises(PredictionHorizonError):
        predict_obstacles(sc, sc.trajectories.shape[1] - 5, 12)


def test_run_episode_zero_obstacles_completes(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=0, speed_interval="v1",
                         seed=1, max_sim_time=110.0)
    sc = make_scenario(cfg, vehicle)
    pid = PidController(v_target=0.8, vehicle=vehicle)
    log = run_episode(sc, pid, vehicle)
    assert log.completed
    assert not log.collision_events
    assert not log.boundary_events
    summary = log.summary(sc, vehicle)
    assert summary["success"]
    assert summary["overtaken"] == 0


def test_run_episode_time_cap(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=0, speed_interval="v1",
                         seed=1, max_sim_time=8.0)
    sc = make_scenario(cfg, vehicle)
    pid = PidController(v_target=0.3, vehicle=vehicle)  # too slow to finish
    log = run_episode(sc, pid, vehicle)
    assert not log.completed
    assert len(log.steps) == sc.n_control_steps


def test_run_episode_aborts_on_controller_failure(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=0, speed_interval="v1",
                         seed=1, max_sim_time=10.0)
    sc = make_scenario(cfg, vehicle)

    def bad_controller(x, step, preds, memory):
        if step == 3:
            raise RuntimeError("boom")
        return np.array([0.5, 0.0]), {}

    log = run_episode(sc, bad_controller, vehicle)
    assert log.aborted_reason is not None
    assert len(log.steps) == 3


def test_run_episode_determinism(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=2, speed_interval="v1",
                         seed=21, max_sim_time=15.0)
    sc = make_scenario(cfg, vehicle)
    a = run_episode(sc, PidController(v_target=0.7, vehicle=vehicle), vehicle)
    b = run_episode(sc, PidController(v_target=0.7, vehicle=vehicle), vehicle)
    assert a.to_csv_string() == b.to_csv_string()


def test_episode_memory_recording(m_track, vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=0, speed_interval="v1",
                         seed=1, max_sim_time=110.0)
    sc = make_scenario(cfg, vehicle)
    memory = LapMemory(sc.track.total_length)
    log = run_episode(sc, PidController(v_target=0.8, vehicle=vehicle), vehicle, memory)
    assert memory.n_finalized == 1
    assert memory.lap_times() == [log.lap_steps]


def test_run_laps_finalizes_each_lap(m_track, vehicle):
    memory = LapMemory(m_track.total_length)
    laps, x = run_laps(m_track, PidController(v_target=0.9, vehicle=vehicle),
                       memory, 2, vehicle)
    assert memory.n_finalized == 2
    assert len(laps) == 2
    assert x[S] < 1.0  # wrapped to the new lap


def test_overtake_count_from_final_log_row(vehicle):
    log = EpisodeLog(n_obstacles=2)
    log.steps = [0, 1]
    log.ego_states = [np.zeros(6), np.array([1.0, 0, 0, 0, 10.0, 0.0])]
    obs = np.zeros((2, 6))
    obs[0, S] = 9.0  # trails by 1.0 > vehicle length
    obs[1, S] = 9.8  # trails by only 0.2
    log.obstacle_states = [np.zeros((2, 6)), obs]

    class FakeScenario:
        class config:
            n_obstacles = 2

    assert count_overtaken(log, FakeScenario, vehicle) == 1


def test_overtaking_phase_predicate(vehicle):
    ego = np.array([1.0, 0, 0, 0, 10.0, 0.0])
    near = np.array([[0.3, 0, 0, 0, 11.0, 0.0]])
    far = np.array([[0.3, 0, 0, 0, 20.0, 0.0]])
    assert overtaking_phase(ego, near, vehicle, 51.0, 5.0, 2.0)
    assert not overtaking_phase(ego, far, vehicle, 51.0, 5.0, 2.0)
    assert not overtaking_phase(ego, np.zeros((0, 6)), vehicle, 51.0, 5.0, 2.0)


def test_csv_schema_and_header(vehicle):
    cfg = ScenarioConfig(track_shape="m_shape", n_obstacles=2, speed_interval="v1",
                         seed=21, max_sim_time=5.0)
    sc = make_scenario(cfg, vehicle)
    log = run_episode(sc, PidController(v_target=0.5, vehicle=vehicle), vehicle)
    text = log.to_csv_string()
    header = text.splitlines()[0].split(",")
    assert header[:8] == ["step", "time", "cand_index", "solve_time",
                          "weight_iters", "overtaking", "collision", "boundary"]
    assert "obs1_ey" in header
    assert len(text.splitlines()) == len(log.steps) + 1


def test_config_json_round_trip():
    cfg = ScenarioConfig(track_shape="l_shape", n_obstacles=5, speed_interval="v3",
                         seed=77, max_sim_time=30.0, spawn_range=(6.0, 30.0))
    clone = ScenarioConfig.from_json(cfg.to_json())
    assert clone == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(n_obstacles=-1)
    with pytest.raises(ValueError):
        ScenarioConfig(speed_interval="v9")
    with pytest.raises(ValueError):
        ScenarioConfig(spawn_range=(40.0, 5.0))
    with pytest.raises(ValueError):
        ScenarioConfig(max_sim_time=0.0)
