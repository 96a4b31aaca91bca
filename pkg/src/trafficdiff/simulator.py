"""Closed-loop rollout engine and metric suite.

At every replan boundary the current simulated scene (including the simulated
history buffer) is re-encoded and a fresh joint plan sampled; between
boundaries the previous plan keeps executing. The ego agent can follow the
model, replay the log, or run an IDM-route controller; agents beyond the
model's capacity hold constant velocity.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .diffusion import build_schedule, sample
from .dynamics import repeat_actions, rollout_array, inverse_dynamics_array, wrap_angle
from .guidance import GuidanceSession, GuidanceSpec, game_guided_sample
from .model import ModelBundle, denoiser_fn, encode_scene
from .scene import (
    AgentDescriptor,
    LaneKind,
    Scenario,
    SceneContext,
    encode_scene_features,
    road_edge_segments,
    boxes_road_distance,
    sat_signed_distance,
)
from .worldgen import Route, idm_accel, ExpertPolicyParams

EGO_PLANNERS = ("model", "log_playback", "idm_route")
AGENT_POLICIES = ("model", "playback", "constant_velocity")


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    total_steps: int = 80
    replan_interval: int = 10  # 1 Hz at dt = 0.1
    sampler: str = "ddim:5"
    guidance: GuidanceSpec | None = None
    ego_planner: str = "model"
    ego_agent: int = 0
    agent_policy: str = "model"
    n_rollouts: int = 1
    seed: int = 0
    history_dropout: float = 1.0  # inference default: current state only

    def __post_init__(self):
        if self.replan_interval < 1 or self.total_steps < 1:
            raise SimulationError("replan_interval and total_steps must be >= 1")
        if self.ego_planner not in EGO_PLANNERS:
            raise SimulationError(f"ego_planner must be one of {EGO_PLANNERS}")
        if self.agent_policy not in AGENT_POLICIES:
            raise SimulationError(f"agent_policy must be one of {AGENT_POLICIES}")
        if isinstance(self.guidance, dict):
            self.guidance = GuidanceSpec(**self.guidance)


@dataclass
class RolloutResult:
    states: np.ndarray  # (A, T_s+1, 5)
    frames: list  # frame-log dicts, one per step 0..T_s


def frame_dict(t: int, states: np.ndarray, ids) -> dict:
    return {
        "t": t,
        "agents": [
            {
                "id": int(ids[i]),
                "x": float(states[i, 0]),
                "y": float(states[i, 1]),
                "psi": float(states[i, 2]),
                "v": float(math.hypot(states[i, 3], states[i, 4])),
            }
            for i in range(len(states))
        ],
    }


def _nearest_route(scene: SceneContext, pose) -> Route | None:
    best, best_d = None, np.inf
    for pl in scene.polylines:
        if pl.lane_kind != LaneKind.lane_center:
            continue
        d = np.min(np.hypot(pl.waypoints[:, 0] - pose[0], pl.waypoints[:, 1] - pose[1]))
        if d < best_d:
            best_d, best = float(d), pl
    if best is None or best_d > 10.0:
        return None
    return Route(best.waypoints.copy())


def idm_route_action(scene_states, dims, ego: int, route: Route | None, params: ExpertPolicyParams, dt: float):
    """IDM longitudinal + pure-pursuit steering on the nearest lane chain."""
    st = scene_states[ego]
    v = math.hypot(st[3], st[4])
    if route is None:
        return 0.0, 0.0  # constant velocity fallback
    s = route.project(st[0], st[1])
    gap, dv = None, 0.0
    for i in range(len(scene_states)):
        if i == ego:
            continue
        other = scene_states[i]
        s_other = route.project(other[0], other[1])
        p_here = route.point_at(s_other)
        if math.hypot(p_here[0] - other[0], p_here[1] - other[1]) > 2.2:
            continue
        ahead = s_other - s
        if 0.0 < ahead < 60.0:
            g = ahead - (dims[ego, 0] + dims[i, 0]) / 2.0
            if gap is None or g < gap:
                gap = g
                dv = v - math.hypot(other[3], other[4])
    a = idm_accel(v, params.desired_speed, gap, dv, params)
    a = float(np.clip(a, -2 * params.comfort_decel, params.max_accel))
    a = max(a, -v / dt)
    look = route.point_at(s + max(params.lookahead, 0.5 * v))
    alpha = float(wrap_angle(math.atan2(look[1] - st[1], look[0] - st[0]) - st[2]))
    ld = max(math.hypot(look[0] - st[0], look[1] - st[1]), 1.0)
    yaw = float(np.clip(2.0 * max(v, 0.3) * math.sin(alpha) / ld, -1.2, 1.2))
    return a, yaw


class ClosedLoopSim:
    """Steppable closed-loop simulation; one instance per rollout.

    Guidance and the ego planner may be swapped between steps (the next replan
    picks them up); stepping past total_steps raises.
    """

    def __init__(self, scenario: Scenario, bundle: ModelBundle, cfg: SimConfig):
        self.scenario = scenario
        self.bundle = bundle
        self.cfg = cfg
        scene = scenario.scene
        self.dt = scene.dt
        self.A = len(scene.agents)
        self.rng = np.random.default_rng(cfg.seed)
        self.schedule = build_schedule(bundle.schedule_kind, bundle.diffusion_config)
        self.scales = np.array([bundle.norm.accel_scale, bundle.norm.yaw_scale])
        self.states = np.stack([ag.current_state for ag in scene.agents]).astype(np.float64)
        self.history = [ag.history.copy() for ag in scene.agents]
        self.dims = np.array([[ag.length, ag.width] for ag in scene.agents])
        self.ids = [ag.id for ag in scene.agents]
        self.gt_controls = scenario.ground_truth_controls()
        self.idm_params = ExpertPolicyParams()
        self.ego_route = None
        if cfg.ego_planner == "idm_route":
            self._resolve_ego_route()
        self.t = 0
        self.plan_phys = np.zeros((self.A, bundle.diffusion_config.horizon, 2))
        self.trajectory = np.zeros((self.A, cfg.total_steps + 1, 5))
        self.trajectory[:, 0] = self.states
        self.frames = [frame_dict(0, self.states, self.ids)]

    def _resolve_ego_route(self):
        self.ego_route = _nearest_route(self.scenario.scene, self.states[self.cfg.ego_agent])
        if self.ego_route is None:
            warnings.warn("idm_route: no lane chain near ego; falling back to constant velocity")

    @property
    def done(self) -> bool:
        return self.t >= self.cfg.total_steps

    def set_guidance(self, spec: GuidanceSpec | None):
        self.cfg.guidance = spec

    def set_ego_planner(self, planner: str):
        if planner not in EGO_PLANNERS:
            raise SimulationError(f"ego_planner must be one of {EGO_PLANNERS}")
        self.cfg.ego_planner = planner
        if planner == "idm_route":
            self._resolve_ego_route()

    def step(self) -> dict:
        if self.done:
            raise SimulationError("simulation already finished")
        cfg = self.cfg
        t = self.t
        t_r = t % cfg.replan_interval
        if t_r == 0 and cfg.agent_policy == "model":
            self.plan_phys = _replan(
                self.scenario, self.bundle, cfg, self.schedule, self.states, self.history,
                self.rng, self.scales,
            )
        if cfg.agent_policy == "model":
            actions = self.plan_phys[:, t_r].copy()
        elif cfg.agent_policy == "playback":
            actions = (
                self.gt_controls[:, t].copy()
                if t < self.gt_controls.shape[1]
                else np.zeros((self.A, 2))
            )
        else:  # constant_velocity
            actions = np.zeros((self.A, 2))
        a_max = self.bundle.model_config.a_max
        if self.A > a_max:
            actions[a_max:] = 0.0  # extra agents hold constant velocity
        if cfg.ego_planner == "log_playback":
            actions[cfg.ego_agent] = (
                self.gt_controls[cfg.ego_agent, t] if t < self.gt_controls.shape[1] else 0.0
            )
        elif cfg.ego_planner == "idm_route":
            actions[cfg.ego_agent] = idm_route_action(
                self.states, self.dims, cfg.ego_agent, self.ego_route, self.idm_params, self.dt
            )
        self.states = rollout_array(self.states, actions[:, None, :], self.dt)[:, 1, :]
        for i in range(self.A):
            self.history[i] = np.concatenate([self.history[i][1:], self.states[i][None]], axis=0)
        self.t += 1
        self.trajectory[:, self.t] = self.states
        frame = frame_dict(self.t, self.states, self.ids)
        self.frames.append(frame)
        return frame

    def run(self) -> RolloutResult:
        while not self.done:
            self.step()
        return RolloutResult(self.trajectory, self.frames)


def simulate(scenario: Scenario, bundle: ModelBundle, cfg: SimConfig) -> RolloutResult:
    """One closed-loop rollout; deterministic per cfg.seed."""
    return ClosedLoopSim(scenario, bundle, cfg).run()


def _replan(scenario, bundle, cfg, schedule, states, history, rng, scales):
    scene = scenario.scene
    sim_agents = [
        AgentDescriptor(
            id=ag.id,
            kind=ag.kind,
            length=ag.length,
            width=ag.width,
            height=ag.height,
            history=history[i].copy(),
            history_valid=ag.history_valid.copy(),
            valid_now=ag.valid_now,
        )
        for i, ag in enumerate(scene.agents)
    ]
    sim_scene = SceneContext(sim_agents, scene.polylines, scene.lights, scene.dt)
    mc = bundle.model_config
    n_model = min(len(sim_agents), mc.a_max)
    model_scene = SceneContext(sim_agents[:n_model], scene.polylines, scene.lights, scene.dt)
    feats = encode_scene_features(model_scene, cfg.history_dropout, rng)
    with tt.no_grad():
        enc = encode_scene(feats, bundle.params, mc)
    fn = denoiser_fn(enc, bundle.params, mc, bundle.norm)
    shape = (1, n_model, mc.t_f, 2)
    spec = cfg.guidance
    if spec is not None and spec.game is not None:
        u = game_guided_sample(
            spec.game, enc, bundle.params, mc, bundle.norm, schedule, rng, fn,
            sampler=cfg.sampler,
        )
    elif spec is not None and spec.terms:
        session = GuidanceSession(spec, enc, bundle.params, mc, bundle.norm, schedule)
        u = sample(fn, shape, schedule, rng, sampler=cfg.sampler, guidance=session)
    else:
        u = sample(fn, shape, schedule, rng, sampler=cfg.sampler)
    plan = repeat_actions(u[0] * scales, mc.action_repeat)  # (n_model, T, 2)
    A = len(sim_agents)
    full = np.zeros((A, plan.shape[1], 2))
    full[:n_model] = plan
    return full


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

KINEMATIC_ACCEL_LIMIT = 6.0  # m/s^2
KINEMATIC_CURVATURE_LIMIT = 0.3  # 1/m
CURVATURE_SPEED_GATE = 0.1  # m/s
WRONG_WAY_ANGLE = math.pi / 2
WRONG_WAY_DURATION = 1.0  # seconds, strictly exceeded


@dataclass
class MetricsReport:
    collision_rate: float
    collision_with_ego_rate: float
    offroad_rate: float
    wrong_way_rate: float
    kinematic_infeasibility_rate: float
    ade: float
    fde: float
    min_ade: float
    min_fde: float
    n_rollouts: int
    per_rollout: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        keys = [k for k in asdict(self) if k != "per_rollout"]
        lines = [",".join(keys), ",".join(repr(getattr(self, k)) for k in keys)]
        return "\n".join(lines) + "\n"


def _pairwise_any_overlap(states: np.ndarray, dims: np.ndarray):
    """(A, A) bool: any-timestep box overlap between each agent pair."""
    A = len(states)
    hit = np.zeros((A, A), dtype=bool)
    for i in range(A):
        for j in range(i + 1, A):
            d = sat_signed_distance(
                states[i, :, 0], states[i, :, 1], states[i, :, 2], dims[i, 0], dims[i, 1],
                states[j, :, 0], states[j, :, 1], states[j, :, 2], dims[j, 0], dims[j, 1],
            )
            if np.any(d < 0):
                hit[i, j] = hit[j, i] = True
    return hit


def _max_true_run(mask: np.ndarray) -> int:
    best = cur = 0
    for v in mask:
        cur = cur + 1 if v else 0
        best = max(best, cur)
    return best


def compute_metrics(
    rollouts: list, scenario: Scenario, ego: int = 0
) -> MetricsReport:
    """Metric suite over one scenario's rollouts (each (A, T+1, 5))."""
    scene = scenario.scene
    gt = scenario.ground_truth
    dims = np.array([[ag.length, ag.width] for ag in scene.agents])
    valid = np.array([ag.valid_now for ag in scene.agents])
    dt = scene.dt
    segments = road_edge_segments(scene.polylines)
    lanes = [pl for pl in scene.polylines if pl.lane_kind == LaneKind.lane_center]
    per_rollout = []
    for states in rollouts:
        states = np.asarray(states)
        if states.shape[1] != gt.shape[1]:
            raise SimulationError(
                f"rollout length {states.shape[1]} does not match ground truth {gt.shape[1]}"
            )
        A, T1 = states.shape[:2]
        hits = _pairwise_any_overlap(states, dims)
        collision = hits.any(axis=1)
        ego_hits = hits[ego] & valid
        ego_hits[ego] = False
        n_non_ego = max(int(valid.sum()) - 1, 1)

        offroad = np.zeros(A, dtype=bool)
        if segments is not None:
            for i in range(A):
                d = boxes_road_distance(
                    states[i, :, :2], states[i, :, 2], dims[i, 0], dims[i, 1], segments
                )
                offroad[i] = bool(d[0] <= 0 and np.any(d[1:] > 0))  # on -> off transition

        wrong = np.zeros(A, dtype=bool)
        if lanes:
            lane_wp = np.concatenate([pl.waypoints for pl in lanes], axis=0)
            for i in range(A):
                d = np.hypot(
                    states[i, :, 0, None] - lane_wp[None, :, 0],
                    states[i, :, 1, None] - lane_wp[None, :, 1],
                )
                dirs = lane_wp[np.argmin(d, axis=1), 2]
                devs = np.abs(wrap_angle(states[i, :, 2] - dirs)) > WRONG_WAY_ANGLE
                wrong[i] = _max_true_run(devs) * dt > WRONG_WAY_DURATION

        accel, yaw = inverse_dynamics_array(states, dt)
        speed = np.hypot(states[:, :-1, 3], states[:, :-1, 4])
        curvature = np.where(speed > CURVATURE_SPEED_GATE, yaw / np.maximum(speed, 1e-9), 0.0)
        kin_bad = (np.abs(accel) > KINEMATIC_ACCEL_LIMIT) | (
            np.abs(curvature) > KINEMATIC_CURVATURE_LIMIT
        )
        kinematic = kin_bad.any(axis=1)

        err = np.linalg.norm(states[:, 1:, :2] - gt[:, 1:, :2], axis=-1)
        ade = float(err[valid].mean())
        fde = float(err[valid][:, -1].mean())
        per_rollout.append(
            {
                "collision_rate": 100.0 * float(collision[valid].mean()),
                "collision_with_ego_rate": 100.0 * float(ego_hits.sum() / n_non_ego),
                "offroad_rate": 100.0 * float(offroad[valid].mean()),
                "wrong_way_rate": 100.0 * float(wrong[valid].mean()),
                "kinematic_infeasibility_rate": 100.0 * float(kinematic[valid].mean()),
                "ade": ade,
                "fde": fde,
            }
        )
    mean = lambda key: float(np.mean([r[key] for r in per_rollout]))
    return MetricsReport(
        collision_rate=mean("collision_rate"),
        collision_with_ego_rate=mean("collision_with_ego_rate"),
        offroad_rate=mean("offroad_rate"),
        wrong_way_rate=mean("wrong_way_rate"),
        kinematic_infeasibility_rate=mean("kinematic_infeasibility_rate"),
        ade=mean("ade"),
        fde=mean("fde"),
        min_ade=float(np.min([r["ade"] for r in per_rollout])),
        min_fde=float(np.min([r["fde"] for r in per_rollout])),
        n_rollouts=len(per_rollout),
        per_rollout=per_rollout,
    )


def write_frame_log(path, frames):
    with open(path, "w", encoding="utf-8") as f:
        for fr in frames:
            f.write(json.dumps(fr, separators=(",", ":")))
            f.write("\n")


def generate_open_loop(
    scenario: Scenario,
    bundle: ModelBundle,
    sampler: str = "ddim:5",
    n_samples: int = 1,
    seed: int = 0,
    guidance: GuidanceSpec | None = None,
) -> np.ndarray:
    """Sample joint plans once and roll them out: (S, A, T+1, 5) states.

    History is fully dropped at inference (current-state conditioning); the
    same seed with and without guidance consumes identical noise draws.
    """
    from . import tensor as tt
    from .diffusion import sample
    from .model import denoiser_fn, encode_scene
    from .guidance import GuidanceSession, game_guided_sample

    rng = np.random.default_rng(seed)
    schedule = build_schedule(bundle.schedule_kind, bundle.diffusion_config)
    feats = encode_scene_features(scenario.scene, history_dropout=1.0, rng=rng)
    with tt.no_grad():
        enc = encode_scene(feats, bundle.params, bundle.model_config)
    fn = denoiser_fn(enc, bundle.params, bundle.model_config, bundle.norm)
    A = feats.n_agents
    mc = bundle.model_config
    shape = (n_samples, A, mc.t_f, 2)
    if guidance is not None and guidance.game is not None:
        u = game_guided_sample(
            guidance.game, enc, bundle.params, mc, bundle.norm, schedule, rng, fn,
            sampler=sampler, n_samples=n_samples,
        )
    elif guidance is not None and guidance.terms:
        session = GuidanceSession(guidance, enc, bundle.params, mc, bundle.norm, schedule)
        u = sample(fn, shape, schedule, rng, sampler=sampler, guidance=session)
    else:
        u = sample(fn, shape, schedule, rng, sampler=sampler)
    scales = np.array([bundle.norm.accel_scale, bundle.norm.yaw_scale])
    plans = repeat_actions(u * scales, mc.action_repeat)
    init = np.broadcast_to(feats.current_states, (n_samples, A, 5))
    return rollout_array(init, plans, scenario.scene.dt)


def plan_collision_rate(states: np.ndarray, dims: np.ndarray, valid: np.ndarray) -> float:
    """Fraction of valid agents in any-step overlap, averaged over samples."""
    rates = []
    for s in range(states.shape[0]):
        hits = _pairwise_any_overlap(states[s], dims)
        rates.append(float(hits.any(axis=1)[valid].mean()))
    return float(np.mean(rates))


def plan_offroad_rate(states: np.ndarray, dims: np.ndarray, valid: np.ndarray, segments) -> float:
    """Fraction of valid agents transitioning on -> off road, over samples."""
    if segments is None:
        return float("nan")
    rates = []
    for s in range(states.shape[0]):
        flags = []
        for i in range(states.shape[1]):
            if not valid[i]:
                continue
            d = boxes_road_distance(
                states[s, i, :, :2], states[s, i, :, 2], dims[i, 0], dims[i, 1], segments
            )
            flags.append(bool(d[0] <= 0 and np.any(d[1:] > 0)))
        rates.append(float(np.mean(flags)))
    return float(np.mean(rates))
