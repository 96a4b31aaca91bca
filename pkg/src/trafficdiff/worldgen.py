"""Procedural maps and expert demonstrations.

Seed-deterministic substitute for a logged driving dataset: lane geometry per
map kind, IDM longitudinal control plus pure-pursuit steering for experts,
red-light yielding, and a line-delimited scenario container with an index.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import Action, AgentState, rollout_array, step_forward, wrap_angle
from .scene import (
    AgentDescriptor,
    AgentKind,
    LaneKind,
    LightState,
    MapPolyline,
    Scenario,
    SceneContext,
    TrafficLight,
    road_edge_segments,
    boxes_road_distance,
    sat_signed_distance,
    scenario_to_json,
)

MAP_KINDS = ("straight", "curve", "four_way_intersection", "merge", "narrow_passage")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldgenConfig:
    seed: int = 0
    map_kind: str = "straight"  # or "mixed" for build_dataset rotation
    n_agents: int = 4
    horizon: int = 80
    history_steps: int = 11
    dt: float = 0.1
    accel_noise: float = 0.08
    yaw_noise: float = 0.004
    tight_spacing: bool = False  # congested placement for stress suites

    def __post_init__(self):
        if self.horizon < 2:
            raise GenerationError("horizon must be >= 2")
        if self.n_agents < 1:
            raise GenerationError("n_agents must be >= 1")


@dataclass(frozen=True)
class ExpertPolicyParams:
    desired_speed: float = 8.0
    time_headway: float = 1.2
    min_gap: float = 2.5
    max_accel: float = 2.0
    comfort_decel: float = 3.0
    lookahead: float = 6.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v <= 0:
                raise GenerationError(f"expert parameter {name} must be positive")


@dataclass
class Route:
    """Dense path an expert follows; arclength-parameterized."""

    waypoints: np.ndarray  # (M, 3)
    light: int | None = None
    stop_s: float | None = None
    arclen: np.ndarray = field(init=False)

    def __post_init__(self):
        d = np.hypot(*np.diff(self.waypoints[:, :2], axis=0).T)
        self.arclen = np.concatenate([[0.0], np.cumsum(d)])

    @property
    def length(self) -> float:
        return float(self.arclen[-1])

    def point_at(self, s: float) -> np.ndarray:
        """(x, y, dir) at arclength s; extrapolates past either end."""
        wp = self.waypoints
        if s <= 0:
            d = wp[0, 2]
            return np.array([wp[0, 0] + s * math.cos(d), wp[0, 1] + s * math.sin(d), d])
        if s >= self.length:
            extra = s - self.length
            d = wp[-1, 2]
            return np.array([wp[-1, 0] + extra * math.cos(d), wp[-1, 1] + extra * math.sin(d), d])
        i = int(np.searchsorted(self.arclen, s) - 1)
        seg = self.arclen[i + 1] - self.arclen[i]
        t = (s - self.arclen[i]) / max(seg, 1e-9)
        xy = (1 - t) * wp[i, :2] + t * wp[i + 1, :2]
        return np.array([xy[0], xy[1], wp[i, 2]])

    def project(self, x: float, y: float) -> float:
        """Continuous arclength of the closest point on the polyline."""
        wp = self.waypoints[:, :2]
        p0 = wp[:-1]
        d = wp[1:] - p0
        seg_len2 = np.maximum((d * d).sum(-1), 1e-12)
        q = np.array([x, y]) - p0
        t = np.clip((q * d).sum(-1) / seg_len2, 0.0, 1.0)
        closest = p0 + t[:, None] * d
        dist2 = ((np.array([x, y]) - closest) ** 2).sum(-1)
        i = int(np.argmin(dist2))
        return float(self.arclen[i] + t[i] * math.sqrt(seg_len2[i]))


@dataclass
class MapLayout:
    polylines: list[MapPolyline]
    lights: list[TrafficLight]
    routes: list[Route]


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def _path_with_dirs(points: np.ndarray) -> np.ndarray:
    """Attach tangent directions (bearing of the next segment) to 2D points."""
    points = np.asarray(points, dtype=np.float64)
    diffs = np.diff(points, axis=0)
    dirs = np.arctan2(diffs[:, 1], diffs[:, 0])
    dirs = np.concatenate([dirs, dirs[-1:]])
    return np.column_stack([points, dirs])


def _line(p0, p1, n: int) -> np.ndarray:
    pts = np.linspace(p0, p1, n)
    out = _path_with_dirs(pts)
    return out


def _arc(center, radius, a0, a1, n: int) -> np.ndarray:
    angles = np.linspace(a0, a1, n)
    pts = np.stack([center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)], 1)
    return _path_with_dirs(pts)


def _lane(points) -> MapPolyline:
    return MapPolyline(points, LaneKind.lane_center)


def _edge(points) -> MapPolyline:
    return MapPolyline(points, LaneKind.road_edge)


# ---------------------------------------------------------------------------
# map builders
# ---------------------------------------------------------------------------


def _map_straight(rng) -> MapLayout:
    half = 80.0
    lanes = [
        _lane(_line((-half, -1.75), (half, -1.75), 17)),
        _lane(_line((-half, 1.75), (half, 1.75), 17)),
    ]
    edges = [
        _edge(_line((-half, -3.5), (half, -3.5), 9)),
        _edge(_line((half, 3.5), (-half, 3.5), 9)),
    ]
    routes = [Route(pl.waypoints.copy()) for pl in lanes]
    return MapLayout(lanes + edges, [], routes)


def _map_curve(rng) -> MapLayout:
    radius = float(rng.uniform(30, 55))
    sweep = float(rng.uniform(math.pi / 2, math.pi * 0.7))
    a0, a1 = -sweep / 2, sweep / 2
    n = max(12, int(radius * sweep / 4))
    lane = _lane(_arc((0, 0), radius, a0, a1, n))
    outer = _edge(_arc((0, 0), radius + 3.0, a0, a1, n))  # ccw: left is inward
    inner = _edge(_arc((0, 0), radius - 3.0, a1, a0, n))  # cw: left is outward
    return MapLayout([lane, outer, inner], [], [Route(lane.waypoints.copy())])


def _map_four_way(rng) -> MapLayout:
    reach, box, off = 45.0, 6.0, 3.0
    # approach key = direction of travel; (far point, stop-line point)
    entries = {
        "E": ((-reach, -off), (-box, -off)),
        "W": ((reach, off), (box, off)),
        "N": ((off, -reach), (off, -box)),
        "S": ((-off, reach), (-off, box)),
    }
    exits = {
        "E": ((box, -off), (reach, -off)),
        "W": ((-box, off), (-reach, off)),
        "N": ((off, box), (off, reach)),
        "S": ((-off, -box), (-off, -reach)),
    }
    # right/left turn targets per approach direction of travel
    right_exit = {"E": "S", "W": "N", "N": "E", "S": "W"}
    left_exit = {"E": "N", "W": "S", "N": "W", "S": "E"}

    approach_pl = {k: _lane(_line(v[0], v[1], 10)) for k, v in entries.items()}
    exit_pl = {k: _lane(_line(v[0], v[1], 10)) for k, v in exits.items()}

    def _connector(kind: str, a: str) -> np.ndarray:
        p_in = np.array(entries[a][1])
        head = approach_pl[a].waypoints[-1, 2]
        if kind == "through":
            p_out = np.array(exits[a][0])
            return _line(p_in, p_out, 6)
        turn = right_exit[a] if kind == "right" else left_exit[a]
        p_out = np.array(exits[turn][0])
        # circle tangent to both headings: center sits perpendicular at entry
        sign = -1.0 if kind == "right" else 1.0
        radius = 3.0 if kind == "right" else 9.0
        center = p_in + radius * np.array(
            [math.cos(head + sign * math.pi / 2), math.sin(head + sign * math.pi / 2)]
        )
        a_start = math.atan2(p_in[1] - center[1], p_in[0] - center[0])
        a_end = math.atan2(p_out[1] - center[1], p_out[0] - center[0])
        if kind == "right":
            while a_end > a_start:
                a_end -= 2 * math.pi
        else:
            while a_end < a_start:
                a_end += 2 * math.pi
        n = max(8, int(abs(a_end - a_start) * radius / 0.6))
        pts = _arc(center, radius, a_start, a_end, n)
        return pts

    connectors = {(a, kind): _connector(kind, a) for a in entries for kind in ("through", "right", "left")}

    # four corner edges keep the union of both corridors drivable; traverse
    # each L so the road interior stays on the left
    corners = []
    for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        p_far_x = np.array([sx * reach, sy * box])
        p_corner = np.array([sx * box, sy * box])
        p_far_y = np.array([sx * box, sy * reach])
        pts = np.concatenate(
            [np.linspace(p_far_x, p_corner, 8), np.linspace(p_corner, p_far_y, 8)[1:]]
        )
        if sx * sy < 0:
            pts = pts[::-1]
        corners.append(_edge(_path_with_dirs(pts)))

    ns_green = bool(rng.integers(0, 2))
    lights = []
    light_idx = {}
    for i, a in enumerate(("E", "W", "N", "S")):
        green = (a in ("N", "S")) == ns_green
        pose = entries[a][1]
        lights.append(TrafficLight(pose[0], pose[1], LightState.green if green else LightState.red))
        light_idx[a] = i

    polylines = []
    routes = []
    for a in entries:
        approach = approach_pl[a]
        approach.controlling_light = light_idx[a]
        polylines.append(approach)
    polylines.extend(exit_pl.values())
    for (a, kind), pts in connectors.items():
        pl = _lane(pts)
        pl.controlling_light = light_idx[a]
        polylines.append(pl)
    polylines.extend(corners)

    for a in entries:
        stop_s = Route(approach_pl[a].waypoints.copy()).length
        for kind in ("through", "right", "left"):
            turn = {"through": a, "right": right_exit[a], "left": left_exit[a]}[kind]
            pts = np.concatenate(
                [approach_pl[a].waypoints, connectors[(a, kind)][1:], exit_pl[turn].waypoints[1:]]
            )[:, :2]
            routes.append(Route(_path_with_dirs(pts), light=light_idx[a], stop_s=stop_s))
    return MapLayout(polylines, lights, routes)


def _map_merge(rng) -> MapLayout:
    half = 70.0
    main = _lane(_line((-half, 0.0), (half, 0.0), 15))
    # ramp: quadratic bezier blending into the main lane at x = 0
    start = np.array([-55.0, -14.0])
    ctrl = np.array([-18.0, -14.0 * 0.25])
    end = np.array([0.0, 0.0])
    t = np.linspace(0, 1, 30)[:, None]
    bez = (1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t**2 * end
    ramp_pts = _path_with_dirs(np.concatenate([bez, np.linspace((4, 0), (half, 0), 10)]))
    ramp = _lane(ramp_pts)
    top = _edge(_line((half, 3.5), (-half, 3.5), 9))
    # lower boundary follows the ramp's outer side then the main road edge
    lower_pre = bez - np.array([0.0, 3.2])
    lower = _edge(_path_with_dirs(np.concatenate([
        np.array([[-half, -3.5]]), lower_pre[:-4], np.array([[2.0, -3.5], [half, -3.5]])
    ])))
    routes = [Route(main.waypoints.copy()), Route(ramp.waypoints.copy())]
    return MapLayout([main, ramp, top, lower], [], routes)


def _map_narrow(rng) -> MapLayout:
    half = 50.0
    xs = np.linspace(-half, half, 41)
    width = 4.5 - 2.4 * np.exp(-((xs / 12.0) ** 2))
    lane = _lane(_line((-half, 0.0), (half, 0.0), 21))
    bottom = _edge(_path_with_dirs(np.column_stack([xs, -width])))
    top = _edge(_path_with_dirs(np.column_stack([xs[::-1], width[::-1]])))
    return MapLayout([lane, bottom, top], [], [Route(lane.waypoints.copy())])


_BUILDERS = {
    "straight": _map_straight,
    "curve": _map_curve,
    "four_way_intersection": _map_four_way,
    "merge": _map_merge,
    "narrow_passage": _map_narrow,
}


def generate_map(config: WorldgenConfig) -> MapLayout:
    """Deterministic map skeleton for the configured kind and seed."""
    if config.map_kind not in _BUILDERS:
        raise GenerationError(f"unknown map kind {config.map_kind!r}")
    rng = np.random.default_rng(config.seed)
    layout = _BUILDERS[config.map_kind](rng)
    for pl in layout.polylines:
        _check_dir_invariant(pl)
    return layout


def _check_dir_invariant(pl: MapPolyline, tol: float = 0.2):
    wp = pl.waypoints
    for i in range(len(wp) - 1):
        seg = wp[i + 1, :2] - wp[i, :2]
        if np.hypot(*seg) < 1e-9:
            continue
        bearing = math.atan2(seg[1], seg[0])
        if abs(float(wrap_angle(bearing - wp[i, 2]))) > tol:
            raise GenerationError("polyline dir deviates from waypoint bearing")


# ---------------------------------------------------------------------------
# expert rollout
# ---------------------------------------------------------------------------


def idm_accel(v: float, v_desired: float, gap: float | None, dv: float, p: ExpertPolicyParams) -> float:
    """IDM longitudinal control; gap None means free road."""
    v = max(v, 0.0)
    free = 1.0 - (v / v_desired) ** 4
    if gap is None:
        return p.max_accel * free
    gap = max(gap, 0.1)
    s_star = p.min_gap + v * p.time_headway + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel))
    return p.max_accel * (free - (max(s_star, 0.0) / gap) ** 2)


@dataclass
class _ExpertAgent:
    idx: int
    route: Route
    s: float
    state: AgentState
    params: ExpertPolicyParams
    length: float
    width: float
    movement: str = "through"


def _expert_step(agents: list[_ExpertAgent], lights, dt: float, rng, cfg: WorldgenConfig):
    accels = []
    yaws = []
    for ag in agents:
        ag.s = ag.route.project(ag.state.x, ag.state.y)
        v = ag.state.speed
        # leader: nearest agent ahead on a route sharing this route's frame
        gap, dv = None, 0.0
        for other in agents:
            if other is ag:
                continue
            s_other = ag.route.project(other.state.x, other.state.y)
            p_here = ag.route.point_at(s_other)
            if math.hypot(p_here[0] - other.state.x, p_here[1] - other.state.y) > 2.2:
                continue  # not on this route's corridor
            ahead = s_other - ag.s
            if 0.0 < ahead < 60.0:
                g = ahead - (ag.length + other.length) / 2.0
                if gap is None or g < gap:
                    gap = g
                    dv = v - other.state.speed
        # red light: standing virtual leader at the stop line
        if ag.route.light is not None and ag.route.stop_s is not None:
            state = lights[ag.route.light].state
            if state in (LightState.red, LightState.yellow) and ag.s < ag.route.stop_s:
                g = ag.route.stop_s - ag.s - ag.length / 2.0
                if gap is None or g < gap:
                    gap = g
                    dv = v
        a = idm_accel(v, ag.params.desired_speed, gap, dv, ag.params)
        a += float(rng.normal(0, cfg.accel_noise))
        a = float(np.clip(a, -ag.params.comfort_decel * 2, ag.params.max_accel * 1.5))
        a = max(a, -v / dt)  # never drive the speed negative
        # pure pursuit toward a lookahead point on the route
        look = ag.route.point_at(ag.s + max(ag.params.lookahead, 0.5 * v))
        alpha = wrap_angle(math.atan2(look[1] - ag.state.y, look[0] - ag.state.x) - ag.state.psi)
        ld = max(math.hypot(look[0] - ag.state.x, look[1] - ag.state.y), 1.0)
        yaw = 2.0 * max(v, 0.3) * math.sin(float(alpha)) / ld
        yaw += float(rng.normal(0, cfg.yaw_noise))
        yaw = float(np.clip(yaw, -1.2, 1.2))
        accels.append(a)
        yaws.append(yaw)
    for ag, a, w in zip(agents, accels, yaws):
        ag.state = step_forward(ag.state, Action(a, w), dt)


def _slot_plan(layout: MapLayout, cfg: WorldgenConfig, rng) -> list[tuple[int, float]]:
    """(route index, arclength) per agent.

    Normal density samples with a minimum same-route gap; tight spacing packs
    agents round-robin into jittered even slots so congested scenes always
    place.
    """
    n_routes = len(layout.routes)
    if cfg.tight_spacing:
        order = rng.permutation(n_routes)
        per_route: dict[int, int] = {}
        assignment = []
        for i in range(cfg.n_agents):
            r = int(order[i % n_routes])
            per_route[r] = per_route.get(r, 0) + 1
            assignment.append(r)
        slots: dict[int, list[float]] = {}
        for r, count in per_route.items():
            route = layout.routes[r]
            lo = 4.0
            hi = max(0.75 * route.length, lo + 8.0 * count)
            gap = (hi - lo) / count
            slots[r] = [
                lo + (j + 0.5) * gap + float(rng.uniform(-0.25, 0.25)) * gap
                for j in rng.permutation(count)
            ]
        return [(r, slots[r].pop()) for r in assignment]
    plan: list[tuple[int, float]] = []
    occupied: dict[int, list[float]] = {}
    for _ in range(cfg.n_agents):
        for _try in range(40):
            cand = int(rng.choice(n_routes))
            route_c = layout.routes[cand]
            s = float(rng.uniform(0.05, 0.7) * max(route_c.length - 15, 10))
            if all(abs(s - o) >= 9.0 for o in occupied.get(cand, [])):
                occupied.setdefault(cand, []).append(s)
                plan.append((cand, s))
                break
        else:
            return []
    return plan


def _place_agents(layout: MapLayout, cfg: WorldgenConfig, rng) -> list[_ExpertAgent]:
    for _ in range(100):
        plan = _slot_plan(layout, cfg, rng)
        if len(plan) < cfg.n_agents:
            continue
        agents = []
        for i, (r_idx, s0) in enumerate(plan):
            route = layout.routes[r_idx]
            pose = route.point_at(s0)
            params = ExpertPolicyParams(
                desired_speed=float(rng.uniform(4.5, 11.0)),
                time_headway=float(rng.uniform(1.0, 1.8)),
                min_gap=float(rng.uniform(2.0, 3.0)),
                max_accel=float(rng.uniform(1.5, 2.5)),
                comfort_decel=float(rng.uniform(2.5, 3.5)),
                lookahead=float(rng.uniform(5.0, 8.0)),
            )
            v0 = float(rng.uniform(0.35, 0.95) * params.desired_speed)
            state = AgentState(
                pose[0], pose[1], pose[2], v0 * math.cos(pose[2]), v0 * math.sin(pose[2])
            )
            agents.append(
                _ExpertAgent(i, route, s0, state, params, length=4.5, width=2.0)
            )
        if len(agents) < cfg.n_agents:
            continue
        # reject overlapping placements
        ok = True
        for i in range(len(agents)):
            for j in range(i + 1, len(agents)):
                a, b = agents[i], agents[j]
                d = sat_signed_distance(
                    a.state.x, a.state.y, a.state.psi, a.length, a.width,
                    b.state.x, b.state.y, b.state.psi, b.length, b.width,
                )
                if d < (0.5 if not cfg.tight_spacing else 0.2):
                    ok = False
        if ok:
            return agents
    raise GenerationError(f"unable to place {cfg.n_agents} agents without overlap")


def generate_demonstration(config: WorldgenConfig, max_attempts: int = 20) -> Scenario:
    """Expert scenario: agents follow lane centers under IDM + pure pursuit.

    Collision-positive rollouts are discarded and regenerated with a shifted
    seed; placement failure after 100 tries raises GenerationError.
    """
    placement_error = None
    for attempt in range(max_attempts):
        seed = config.seed + 1_000_003 * attempt
        rng = np.random.default_rng(seed)
        layout = generate_map(replace(config, seed=seed))
        try:
            agents = _place_agents(layout, config, rng)
        except GenerationError as e:
            placement_error = e  # a reseeded map may still fit; retry
            continue
        n_steps = config.history_steps - 1 + config.horizon
        states = np.zeros((len(agents), n_steps + 1, 5))
        for i, ag in enumerate(agents):
            states[i, 0] = ag.state.as_array()
        for t in range(n_steps):
            _expert_step(agents, layout.lights, config.dt, rng, config)
            for i, ag in enumerate(agents):
                states[i, t + 1] = ag.state.as_array()
        # discard rollouts with any overlap
        collided = False
        for i in range(len(agents)):
            for j in range(i + 1, len(agents)):
                d = sat_signed_distance(
                    states[i, :, 0], states[i, :, 1], states[i, :, 2], 4.5, 2.0,
                    states[j, :, 0], states[j, :, 1], states[j, :, 2], 4.5, 2.0,
                )
                if np.any(d < 0):
                    collided = True
        if collided:
            continue
        t_h = config.history_steps
        descriptors = [
            AgentDescriptor(
                id=i,
                kind=AgentKind.vehicle,
                length=ag.length,
                width=ag.width,
                height=1.6,
                history=states[i, :t_h].copy(),
                history_valid=np.ones(t_h, dtype=bool),
            )
            for i, ag in enumerate(agents)
        ]
        scene = SceneContext(descriptors, layout.polylines, layout.lights, config.dt)
        gt = states[:, t_h - 1 :].copy()
        scenario = Scenario(scene, gt)
        _validate_scenario(scenario)
        return scenario
    if placement_error is not None:
        raise placement_error
    raise GenerationError(f"no collision-free scenario after {max_attempts} attempts")


def _validate_scenario(sc: Scenario):
    """Emitted scenarios: action/trajectory consistency, no initial overlap,
    everyone initially on-road."""
    u = sc.ground_truth_controls()
    recon = rollout_array(sc.ground_truth[:, 0], u, sc.scene.dt)
    err = np.max(np.abs(recon[:, :, :2] - sc.ground_truth[:, :, :2]))
    if err > 1e-6:
        raise GenerationError(f"controls/trajectory inconsistency {err:.2e}")
    segments = road_edge_segments(sc.scene.polylines)
    if segments is not None:
        for ag in sc.scene.agents:
            st = ag.current_state
            d = boxes_road_distance(st[:2], st[2], ag.length, ag.width, segments)
            if d > 0:
                raise GenerationError(f"agent {ag.id} starts off-road (d_r={d:.2f})")


# ---------------------------------------------------------------------------
# dataset container: one scenario JSON per line + an index document
# ---------------------------------------------------------------------------


def dataset_configs(master_seed: int, count: int, base: WorldgenConfig) -> list[WorldgenConfig]:
    kinds = MAP_KINDS if base.map_kind == "mixed" else (base.map_kind,)
    rng = np.random.default_rng(master_seed)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        n = base.n_agents
        out.append(replace(base, seed=int(seeds[i]), map_kind=kind, n_agents=n))
    return out


def _demonstration_json(cfg: WorldgenConfig) -> tuple[str, float]:
    scenario = generate_demonstration(cfg)
    speed = float(np.mean(np.hypot(scenario.ground_truth[..., 3], scenario.ground_truth[..., 4])))
    return scenario_to_json(scenario), speed


def build_dataset(out_path, master_seed: int, count: int, base: WorldgenConfig, jobs: int = 1):
    """Write scenarios to ``out_path`` (.jsonl) and an index beside it.

    ``jobs`` parallelizes generation across scenarios; records are written in
    index order either way, so the container bytes do not depend on it.
    """
    out_path = str(out_path)
    stats = {"count": 0, "mean_speed": 0.0, "collisions": 0, "map_kinds": {}}
    speeds = []
    configs = dataset_configs(master_seed, count, base)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_demonstration_json, configs, chunksize=8))
    else:
        results = (_demonstration_json(cfg) for cfg in configs)
    with open(out_path, "w", encoding="utf-8") as f:
        for cfg, (doc, speed) in zip(configs, results):
            f.write(doc)
            f.write("\n")
            speeds.append(speed)
            stats["count"] += 1
            stats["map_kinds"][cfg.map_kind] = stats["map_kinds"].get(cfg.map_kind, 0) + 1
    stats["mean_speed"] = float(np.mean(speeds)) if speeds else 0.0
    index = {
        "container": os.path.basename(out_path),  # no absolute paths in outputs
        "master_seed": master_seed,
        "requested": count,
        "stats": stats,
    }
    index_path = out_path + ".index.json"
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return index


def load_dataset(path) -> list[Scenario]:
    from .scene import scenario_from_json

    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(scenario_from_json(line))
    return out
