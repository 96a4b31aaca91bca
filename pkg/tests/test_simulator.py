import math

import numpy as np
import pytest

import trafficdiff.model as mdl
import trafficdiff.simulator as sim
from trafficdiff.diffusion import DiffusionConfig
from trafficdiff.dynamics import ActionNormalization, rollout_array
from trafficdiff.model import ModelBundle, ModelConfig
from trafficdiff.scene import AgentKind, LaneKind, MapPolyline, Scenario, SceneContext
from trafficdiff.simulator import MetricsReport, SimConfig, compute_metrics, simulate
from trafficdiff.worldgen import WorldgenConfig, generate_demonstration

from test_scene import make_agent, straight_corridor

MC = ModelConfig(
    embed_dim=16, heads=2, encoder_layers=1, predictor_layers=1, denoiser_blocks=1,
    modes=3, a_max=4, t_f=10, action_repeat=2, k_steps=5, t_h=11,
)
DC = DiffusionConfig(k_steps=5, horizon=20)


@pytest.fixture(scope="module")
def scenario():
    return generate_demonstration(WorldgenConfig(seed=4, map_kind="straight", n_agents=3, horizon=20))


@pytest.fixture(scope="module")
def bundle(scenario):
    params = mdl.init_params(MC, np.random.default_rng(0))
    anchors = {"vehicle": np.random.default_rng(1).normal(0, 20, (MC.modes, 2))}
    return ModelBundle(params, anchors, MC, DC, "log", ActionNormalization())


def test_playback_policy_reproduces_ground_truth(scenario, bundle):
    cfg = SimConfig(total_steps=20, ego_planner="log_playback", agent_policy="playback", seed=0)
    result = simulate(scenario, bundle, cfg)
    np.testing.assert_allclose(result.states[:, :, :2], scenario.ground_truth[:, :, :2], atol=1e-6)


def test_single_plan_when_replan_interval_exceeds_steps(scenario, bundle):
    cfg = SimConfig(total_steps=8, replan_interval=100, sampler="ddim:2", seed=1)
    result = simulate(scenario, bundle, cfg)
    assert result.states.shape == (3, 9, 5)
    assert len(result.frames) == 9


def test_seed_determinism(scenario, bundle):
    cfg = SimConfig(total_steps=10, replan_interval=5, sampler="ddim:2", seed=7)
    a = simulate(scenario, bundle, cfg)
    b = simulate(scenario, bundle, cfg)
    assert np.array_equal(a.states, b.states)
    assert a.frames == b.frames


def test_model_policy_reacts_to_ego(scenario, bundle):
    """Replanning consumes the simulated (not logged) scene state."""
    cfg1 = SimConfig(total_steps=10, replan_interval=5, sampler="ddim:2", seed=3, ego_planner="log_playback")
    cfg2 = SimConfig(total_steps=10, replan_interval=5, sampler="ddim:2", seed=3, ego_planner="idm_route")
    a = simulate(scenario, bundle, cfg1)
    b = simulate(scenario, bundle, cfg2)
    assert not np.allclose(a.states[0], b.states[0])  # different ego behavior


def test_idm_ego_approaches_desired_speed_on_empty_road(bundle):
    scene = SceneContext([make_agent(0, -60.0, -1.75, vx=2.0, t_h=11)], straight_corridor(half_width=3.5, length=200), [], dt=0.1)
    gt = rollout_array(scene.agents[0].current_state, np.zeros((120, 2)), 0.1)[None]
    scenario = Scenario(scene, gt)
    cfg = SimConfig(total_steps=120, ego_planner="idm_route", agent_policy="constant_velocity", seed=0)
    result = simulate(scenario, bundle, cfg)
    speeds = np.hypot(result.states[0, :, 3], result.states[0, :, 4])
    assert speeds[-1] == pytest.approx(sim.ExpertPolicyParams().desired_speed, rel=0.1)


def test_idm_ego_brakes_behind_stopped_leader(bundle):
    agents = [
        make_agent(0, -30.0, -1.75, vx=6.0, t_h=11),
        make_agent(1, 0.0, -1.75, vx=0.0, t_h=11),
    ]
    scene = SceneContext(agents, straight_corridor(half_width=3.5, length=200), [], dt=0.1)
    gt = np.stack([
        rollout_array(agents[0].current_state, np.zeros((150, 2)), 0.1),
        rollout_array(agents[1].current_state, np.zeros((150, 2)), 0.1),
    ])
    scenario = Scenario(scene, gt)
    cfg = SimConfig(total_steps=150, ego_planner="idm_route", agent_policy="constant_velocity", seed=0)
    result = simulate(scenario, bundle, cfg)
    ego_x = result.states[0, :, 0]
    # never hits the stopped leader, respects a positive gap
    assert ego_x.max() < 0.0 - 4.5  # leader rear bumper minus ego half lengths
    speeds = np.hypot(result.states[0, :, 3], result.states[0, :, 4])
    assert speeds[-1] < 0.5


def test_ego_fallback_warns_without_lane(bundle):
    scene = SceneContext(
        [make_agent(0, 0.0, 0.0, vx=2.0, t_h=11)],
        [MapPolyline(np.array([[0, -50, 0], [10, -50, 0]]), LaneKind.road_edge)],
        [],
        dt=0.1,
    )
    gt = rollout_array(scene.agents[0].current_state, np.zeros((10, 2)), 0.1)[None]
    scenario = Scenario(scene, gt)
    cfg = SimConfig(total_steps=10, ego_planner="idm_route", agent_policy="constant_velocity", seed=0)
    with pytest.warns(UserWarning):
        result = simulate(scenario, bundle, cfg)
    np.testing.assert_allclose(result.states[0, :, :2], gt[0, :, :2], atol=1e-9)


# -- metrics -------------------------------------------------------------------


def playback_states(scenario):
    return [scenario.ground_truth.copy()]


def test_metrics_zero_error_on_ground_truth(scenario):
    report = compute_metrics(playback_states(scenario), scenario)
    assert report.ade == 0.0 and report.fde == 0.0 and report.min_ade == 0.0
    assert report.collision_rate == 0.0


def test_metrics_min_ade_le_ade(scenario, bundle):
    rollouts = []
    for seed in range(3):
        cfg = SimConfig(total_steps=20, replan_interval=10, sampler="ddim:2", seed=seed)
        rollouts.append(simulate(scenario, bundle, cfg).states)
    report = compute_metrics(rollouts, scenario)
    assert report.min_ade <= report.ade
    assert report.min_fde <= report.fde
    assert report.n_rollouts == 3


def test_metrics_single_rollout_min_equals_mean(scenario, bundle):
    cfg = SimConfig(total_steps=20, replan_interval=10, sampler="ddim:2", seed=0)
    report = compute_metrics([simulate(scenario, bundle, cfg).states], scenario)
    assert report.min_ade == report.ade


def test_metrics_recomputation_is_pure(scenario, bundle):
    cfg = SimConfig(total_steps=20, replan_interval=10, sampler="ddim:2", seed=0)
    states = simulate(scenario, bundle, cfg).states
    r1 = compute_metrics([states], scenario)
    r2 = compute_metrics([states], scenario)
    assert r1.to_json() == r2.to_json()


def test_metrics_rejects_mismatched_length(scenario):
    with pytest.raises(sim.SimulationError):
        compute_metrics([scenario.ground_truth[:, :-2]], scenario)


def hand_scene(n=2, T=20):
    agents = [make_agent(i, 0.0, 6.0 * i, vx=0.0, t_h=3) for i in range(n)]
    scene = SceneContext(agents, straight_corridor(half_width=12.0), [], dt=0.1)
    gt = np.stack([rollout_array(a.current_state, np.zeros((T, 2)), 0.1) for a in agents])
    return Scenario(scene, gt)


def test_metrics_forced_crossing_counts_both_agents():
    scenario = hand_scene(2)
    states = scenario.ground_truth.copy()
    # agent 1 teleports through agent 0's position at step 5
    states[1, 5, :2] = states[0, 5, :2]
    report = compute_metrics([states], scenario)
    assert report.collision_rate == pytest.approx(100.0)
    assert report.collision_with_ego_rate == pytest.approx(100.0)


def test_metrics_wrong_way_duration_threshold():
    scenario = hand_scene(1)
    states = scenario.ground_truth.copy()
    flipped = states.copy()
    flipped[0, 1:16, 2] = math.pi  # 15 steps = 1.5 s reversed on an eastbound lane
    report = compute_metrics([flipped], scenario)
    assert report.wrong_way_rate == pytest.approx(100.0)
    flipped2 = states.copy()
    flipped2[0, 1:10, 2] = math.pi  # 0.9 s: below the > 1 s threshold
    report2 = compute_metrics([flipped2], scenario)
    assert report2.wrong_way_rate == 0.0


def test_metrics_offroad_transition_only():
    scenario = hand_scene(1)
    states = scenario.ground_truth.copy()
    states[0, 10:, 1] = 30.0  # leaves the corridor mid-rollout
    report = compute_metrics([states], scenario)
    assert report.offroad_rate == pytest.approx(100.0)
    report_gt = compute_metrics([scenario.ground_truth], scenario)
    assert report_gt.offroad_rate == 0.0


def test_metrics_kinematic_limits():
    scenario = hand_scene(1)
    T = scenario.ground_truth.shape[1] - 1
    # accelerate at 8 m/s^2 from rest: infeasible
    hard = rollout_array(scenario.ground_truth[0, 0], np.tile([8.0, 0.0], (T, 1)), 0.1)[None]
    report = compute_metrics([hard], scenario)
    assert report.kinematic_infeasibility_rate == pytest.approx(100.0)
    # gentle accel at 1 m/s^2 is feasible
    soft = rollout_array(scenario.ground_truth[0, 0], np.tile([1.0, 0.0], (T, 1)), 0.1)[None]
    assert compute_metrics([soft], scenario).kinematic_infeasibility_rate == 0.0
    # high curvature at speed: yaw 0.9 rad/s at ~3 m/s exceeds 0.3 1/m
    curve = rollout_array(
        np.array([0, 0, 0, 3.0, 0]), np.tile([0.0, 0.9], (T, 1)), 0.1
    )[None]
    assert compute_metrics([curve], scenario).kinematic_infeasibility_rate == pytest.approx(100.0)


def test_frame_log_roundtrip(tmp_path, scenario, bundle):
    cfg = SimConfig(total_steps=5, replan_interval=5, sampler="ddim:2", seed=0)
    result = simulate(scenario, bundle, cfg)
    path = tmp_path / "frames.jsonl"
    sim.write_frame_log(path, result.frames)
    import json

    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines == result.frames
    assert lines[0]["t"] == 0
    assert set(lines[0]["agents"][0]) == {"id", "x", "y", "psi", "v"}
