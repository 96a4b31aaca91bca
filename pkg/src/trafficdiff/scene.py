"""Scene data model and geometric primitives.

Agents, map polylines and traffic lights, local-frame transforms, oriented-box
distances, road-edge distances, and the per-scene feature bundle consumed by
the network. Road edges are oriented polylines whose drivable side is the
left; the signed road distance is negative on-road and positive off-road.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dynamics import inverse_dynamics_array, wrap_angle

SCENARIO_FORMAT_VERSION = 1
FEATURE_SCHEMA_VERSION = 1

AGENT_FEATURE_DIM = 11  # x, y, cos/sin psi, vx, vy, l, w, kind one-hot(3)
WAYPOINT_FEATURE_DIM = 11  # x, y, cos/sin dir, lane one-hot(3), light one-hot(4)
LIGHT_FEATURE_DIM = 6  # x, y, state one-hot(4)


class InvalidSceneError(ValueError):
    pass


class AgentKind(str, Enum):
    vehicle = "vehicle"
    pedestrian = "pedestrian"
    cyclist = "cyclist"


class LaneKind(str, Enum):
    lane_center = "lane_center"
    road_edge = "road_edge"
    crosswalk = "crosswalk"


class LightState(str, Enum):
    red = "red"
    yellow = "yellow"
    green = "green"
    unknown = "unknown"


@dataclass
class AgentDescriptor:
    id: int
    kind: AgentKind
    length: float
    width: float
    height: float
    history: np.ndarray  # (T_h, 5) states, last row is the current state
    history_valid: np.ndarray  # (T_h,) bool
    valid_now: bool = True

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.float64)
        self.history_valid = np.asarray(self.history_valid, dtype=bool)
        if not (self.length > 0 and self.width > 0):
            raise InvalidSceneError(f"agent {self.id}: nonpositive footprint")
        if self.history.shape != (len(self.history_valid), 5):
            raise InvalidSceneError(f"agent {self.id}: history shape mismatch")

    @property
    def current_state(self) -> np.ndarray:
        return self.history[-1]

    @property
    def current_pose(self) -> np.ndarray:
        return self.history[-1, :3]


@dataclass
class MapPolyline:
    waypoints: np.ndarray  # (M, 3) of x, y, dir
    lane_kind: LaneKind
    controlling_light: int | None = None

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.lane_kind == LaneKind.road_edge and len(self.waypoints) < 2:
            raise InvalidSceneError("road_edge polyline needs at least 2 waypoints")


@dataclass
class TrafficLight:
    x: float
    y: float
    state: LightState


@dataclass
class SceneContext:
    agents: list[AgentDescriptor]
    polylines: list[MapPolyline]
    lights: list[TrafficLight]
    dt: float

    def validate(self):
        if not any(a.valid_now for a in self.agents):
            raise InvalidSceneError("scene has no valid agent")
        if self.dt <= 0:
            raise InvalidSceneError("dt must be positive")


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    heading: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        return box_corners(
            np.array([self.x, self.y]), self.heading, self.length, self.width
        )


@dataclass(frozen=True)
class RelativePose:
    dx: float
    dy: float
    dheading: float


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def to_local_frame(points: np.ndarray, ref_pose) -> np.ndarray:
    """Express global points (..., 2) in the frame of ref_pose (x, y, heading)."""
    ref_pose = np.asarray(ref_pose, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64) - ref_pose[:2]
    c, s = math.cos(ref_pose[2]), math.sin(ref_pose[2])
    return np.stack([p[..., 0] * c + p[..., 1] * s, -p[..., 0] * s + p[..., 1] * c], axis=-1)


def to_global_frame(points: np.ndarray, ref_pose) -> np.ndarray:
    ref_pose = np.asarray(ref_pose, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ref_pose[2]), math.sin(ref_pose[2])
    rotated = np.stack([p[..., 0] * c - p[..., 1] * s, p[..., 0] * s + p[..., 1] * c], axis=-1)
    return rotated + ref_pose[:2]


def relative_pose(a_pose, b_pose) -> RelativePose:
    """Pose b expressed in a's frame."""
    a_pose = np.asarray(a_pose, dtype=np.float64)
    b_pose = np.asarray(b_pose, dtype=np.float64)
    dxy = to_local_frame(b_pose[:2], a_pose)
    return RelativePose(float(dxy[0]), float(dxy[1]), float(wrap_angle(b_pose[2] - a_pose[2])))


def relative_pose_table(poses: np.ndarray) -> np.ndarray:
    """Pairwise (N, N, 3) table: row i holds every pose expressed in pose i's frame."""
    poses = np.asarray(poses, dtype=np.float64)
    d = poses[None, :, :2] - poses[:, None, :2]
    c = np.cos(poses[:, 2])[:, None]
    s = np.sin(poses[:, 2])[:, None]
    dx = d[..., 0] * c + d[..., 1] * s
    dy = -d[..., 0] * s + d[..., 1] * c
    dh = wrap_angle(poses[None, :, 2] - poses[:, None, 2])
    return np.stack([dx, dy, dh], axis=-1)


# ---------------------------------------------------------------------------
# oriented boxes (separating-axis signed distance)
# ---------------------------------------------------------------------------


def box_corners(center, heading, length, width) -> np.ndarray:
    """Corners (..., 4, 2) of oriented rectangles; inputs broadcast."""
    center = np.asarray(center, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    dirx = np.stack([c, s], axis=-1)
    diry = np.stack([-s, c], axis=-1)
    half_l = (np.asarray(length) / 2.0)[..., None]
    half_w = (np.asarray(width) / 2.0)[..., None]
    offsets = []
    for sl, sw in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        offsets.append(center + sl * half_l * dirx + sw * half_w * diry)
    return np.stack(offsets, axis=-2)


def sat_signed_distance(ax, ay, ah, al, aw, bx, by, bh, bl, bw):
    """Vectorized SAT signed distance between oriented rectangles.

    Positive values are separation gaps along the best axis, negative values
    are penetration depth; inputs broadcast over leading dims.
    """
    gaps = []
    dcx = np.asarray(bx, dtype=np.float64) - ax
    dcy = np.asarray(by, dtype=np.float64) - ay
    for h, _l, _w in ((ah, al, aw), (bh, bl, bw)):
        c, s = np.cos(h), np.sin(h)
        for ux, uy in ((c, s), (-s, c)):
            proj = np.abs(dcx * ux + dcy * uy)
            ra = _box_radius(ah, al, aw, ux, uy)
            rb = _box_radius(bh, bl, bw, ux, uy)
            gaps.append(proj - ra - rb)
    return np.max(np.stack(gaps, axis=0), axis=0)


def _box_radius(h, length, width, ux, uy):
    c, s = np.cos(h), np.sin(h)
    return (np.asarray(length) / 2.0) * np.abs(ux * c + uy * s) + (
        np.asarray(width) / 2.0
    ) * np.abs(-ux * s + uy * c)


def signed_box_distance(a: OrientedBox, b: OrientedBox) -> float:
    return float(
        sat_signed_distance(
            a.x, a.y, a.heading, a.length, a.width, b.x, b.y, b.heading, b.length, b.width
        )
    )


def box_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    return signed_box_distance(a, b) < 0


# ---------------------------------------------------------------------------
# road edges and lane queries
# ---------------------------------------------------------------------------


def road_edge_segments(polylines) -> np.ndarray | None:
    """All oriented road-edge segments stacked as (S, 2, 2), or None."""
    segs = []
    for pl in polylines:
        if pl.lane_kind != LaneKind.road_edge:
            continue
        wp = pl.waypoints[:, :2]
        segs.append(np.stack([wp[:-1], wp[1:]], axis=1))
    if not segs:
        return None
    return np.concatenate(segs, axis=0)


def point_road_side_distance(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Signed distance of points (..., 2) to the nearest oriented segment.

    Negative = left of the segment (on-road), positive = right (off-road).
    """
    points = np.asarray(points, dtype=np.float64)
    p = points.reshape(-1, 1, 2)
    p0 = segments[None, :, 0, :]
    d = segments[None, :, 1, :] - p0
    seg_len2 = np.maximum((d * d).sum(-1), 1e-12)
    t = np.clip(((p - p0) * d).sum(-1) / seg_len2, 0.0, 1.0)
    closest = p0 + t[..., None] * d
    diff = p - closest
    dist = np.sqrt((diff * diff).sum(-1))
    cross = d[..., 0] * (p - p0)[..., 1] - d[..., 1] * (p - p0)[..., 0]
    nearest = np.argmin(dist, axis=1)
    rows = np.arange(len(p))
    signed = np.where(cross[rows, nearest] > 0, -dist[rows, nearest], dist[rows, nearest])
    return signed.reshape(points.shape[:-1])


def signed_road_edge_distance(box: OrientedBox, polylines) -> float | None:
    """Worst-corner signed distance to the nearest road edge (None if no edges)."""
    segments = road_edge_segments(polylines)
    if segments is None:
        return None
    return float(np.max(point_road_side_distance(box.corners(), segments)))


def boxes_road_distance(centers, headings, lengths, widths, segments) -> np.ndarray:
    """Vectorized worst-corner road distance for boxes (...,) given segments."""
    corners = box_corners(centers, headings, lengths, widths)
    return point_road_side_distance(corners, segments).max(axis=-1)


def closest_lane_direction(pose, polylines) -> float | None:
    """Direction of the nearest lane-center waypoint (ties: first in scan order)."""
    pose = np.asarray(pose, dtype=np.float64)
    best = None
    best_dist = np.inf
    for pl in polylines:
        if pl.lane_kind != LaneKind.lane_center:
            continue
        d = np.hypot(pl.waypoints[:, 0] - pose[0], pl.waypoints[:, 1] - pose[1])
        i = int(np.argmin(d))
        if d[i] < best_dist:
            best_dist = float(d[i])
            best = float(pl.waypoints[i, 2])
    return best


# ---------------------------------------------------------------------------
# feature encoding
# ---------------------------------------------------------------------------

_KIND_INDEX = {AgentKind.vehicle: 0, AgentKind.pedestrian: 1, AgentKind.cyclist: 2}
_LANE_INDEX = {LaneKind.lane_center: 0, LaneKind.road_edge: 1, LaneKind.crosswalk: 2}
_LIGHT_INDEX = {LightState.red: 0, LightState.yellow: 1, LightState.green: 2, LightState.unknown: 3}


@dataclass
class FeatureBundle:
    """Flat per-element features plus the pairwise relative-pose table.

    All positional attributes are expressed in each element's own frame
    (agents: current pose; polylines: first waypoint; lights: stop point), so
    the bundle is invariant to rigid motions of the whole scene except through
    ``ref_poses`` and ``rel_pose``.
    """

    agent_feat: np.ndarray  # (A, T_h, AGENT_FEATURE_DIM)
    agent_step_valid: np.ndarray  # (A, T_h) bool
    agent_valid: np.ndarray  # (A,) bool
    poly_feat: np.ndarray  # (L, P, WAYPOINT_FEATURE_DIM)
    poly_wp_valid: np.ndarray  # (L, P) bool
    light_feat: np.ndarray  # (G, LIGHT_FEATURE_DIM)
    ref_poses: np.ndarray  # (A+L+G, 3) global
    rel_pose: np.ndarray  # (N, N, 3)
    current_states: np.ndarray  # (A, 5) global
    agent_dims: np.ndarray  # (A, 2) length, width
    agent_kinds: list[AgentKind]
    dt: float
    schema_version: int = FEATURE_SCHEMA_VERSION

    @property
    def n_agents(self) -> int:
        return len(self.agent_feat)

    @property
    def n_tokens(self) -> int:
        return len(self.ref_poses)

    @property
    def token_valid(self) -> np.ndarray:
        return np.concatenate(
            [
                self.agent_valid,
                np.ones(len(self.poly_feat), dtype=bool),
                np.ones(len(self.light_feat), dtype=bool),
            ]
        )


def encode_scene_features(
    scene: SceneContext, history_dropout: float = 0.0, rng: np.random.Generator | None = None
) -> FeatureBundle:
    """Build the numeric feature bundle for one scene.

    ``history_dropout`` removes entire per-agent histories (all steps except
    the current one) with the given probability; 1.0 reproduces the
    inference-time current-state-only view. Deterministic given the rng state.
    """
    if not 0.0 <= history_dropout <= 1.0:
        raise InvalidSceneError("history_dropout must be within [0, 1]")
    scene.validate()
    if history_dropout > 0 and rng is None:
        raise InvalidSceneError("history_dropout > 0 requires an rng")

    A = len(scene.agents)
    t_h = len(scene.agents[0].history) if A else 0
    agent_feat = np.zeros((A, t_h, AGENT_FEATURE_DIM))
    step_valid = np.zeros((A, t_h), dtype=bool)
    agent_valid = np.zeros(A, dtype=bool)
    for i, ag in enumerate(scene.agents):
        agent_valid[i] = ag.valid_now
        keep_history = True
        if history_dropout > 0:
            keep_history = rng.uniform() >= history_dropout
        valid = ag.history_valid.copy()
        if not keep_history:
            valid[:-1] = False
        ref = ag.current_pose
        xy = to_local_frame(ag.history[:, :2], ref)
        dpsi = ag.history[:, 2] - ref[2]
        c, s = math.cos(ref[2]), math.sin(ref[2])
        vx = ag.history[:, 3] * c + ag.history[:, 4] * s
        vy = -ag.history[:, 3] * s + ag.history[:, 4] * c
        feat = np.zeros((t_h, AGENT_FEATURE_DIM))
        feat[:, 0:2] = xy
        feat[:, 2] = np.cos(dpsi)
        feat[:, 3] = np.sin(dpsi)
        feat[:, 4] = vx
        feat[:, 5] = vy
        feat[:, 6] = ag.length
        feat[:, 7] = ag.width
        feat[:, 8 + _KIND_INDEX[ag.kind]] = 1.0
        feat[~valid] = 0.0
        agent_feat[i] = feat
        step_valid[i] = valid

    L = len(scene.polylines)
    P = max((len(pl.waypoints) for pl in scene.polylines), default=0)
    poly_feat = np.zeros((L, P, WAYPOINT_FEATURE_DIM))
    wp_valid = np.zeros((L, P), dtype=bool)
    light_states = {i: lt.state for i, lt in enumerate(scene.lights)}
    for i, pl in enumerate(scene.polylines):
        n = len(pl.waypoints)
        ref = pl.waypoints[0]
        xy = to_local_frame(pl.waypoints[:, :2], ref)
        ddir = pl.waypoints[:, 2] - ref[2]
        poly_feat[i, :n, 0:2] = xy
        poly_feat[i, :n, 2] = np.cos(ddir)
        poly_feat[i, :n, 3] = np.sin(ddir)
        poly_feat[i, :n, 4 + _LANE_INDEX[pl.lane_kind]] = 1.0
        state = LightState.unknown
        if pl.controlling_light is not None and pl.controlling_light in light_states:
            state = light_states[pl.controlling_light]
        poly_feat[i, :n, 7 + _LIGHT_INDEX[state]] = 1.0
        wp_valid[i, :n] = True

    G = len(scene.lights)
    light_feat = np.zeros((G, LIGHT_FEATURE_DIM))
    for i, lt in enumerate(scene.lights):
        light_feat[i, 2 + _LIGHT_INDEX[lt.state]] = 1.0  # x, y stay 0 in local frame

    ref_poses = np.zeros((A + L + G, 3))
    for i, ag in enumerate(scene.agents):
        ref_poses[i] = ag.current_pose
    for i, pl in enumerate(scene.polylines):
        ref_poses[A + i] = pl.waypoints[0]
    for i, lt in enumerate(scene.lights):
        ref_poses[A + L + i] = (lt.x, lt.y, 0.0)

    return FeatureBundle(
        agent_feat=agent_feat,
        agent_step_valid=step_valid,
        agent_valid=agent_valid,
        poly_feat=poly_feat,
        poly_wp_valid=wp_valid,
        light_feat=light_feat,
        ref_poses=ref_poses,
        rel_pose=relative_pose_table(ref_poses),
        current_states=np.stack([ag.current_state for ag in scene.agents]),
        agent_dims=np.array([[ag.length, ag.width] for ag in scene.agents]),
        agent_kinds=[ag.kind for ag in scene.agents],
        dt=scene.dt,
    )


# ---------------------------------------------------------------------------
# scenario document io
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    scene: SceneContext
    ground_truth: np.ndarray  # (A, T+1, 5); row 0 equals each agent's current state

    @property
    def horizon(self) -> int:
        return self.ground_truth.shape[1] - 1

    def ground_truth_controls(self) -> np.ndarray:
        """(A, T, 2) actions recovered from the logged trajectories."""
        accel, yaw = inverse_dynamics_array(self.ground_truth, self.scene.dt)
        return np.stack([accel, yaw], axis=-1)


def scenario_to_json(sc: Scenario) -> str:
    doc = {
        "version": SCENARIO_FORMAT_VERSION,
        "dt": sc.scene.dt,
        "agents": [
            {
                "id": ag.id,
                "kind": ag.kind.value,
                "length": ag.length,
                "width": ag.width,
                "height": ag.height,
                "valid_now": ag.valid_now,
                "history": [list(map(float, row)) for row in ag.history],
                "history_valid": [bool(v) for v in ag.history_valid],
            }
            for ag in sc.scene.agents
        ],
        "polylines": [
            {
                "lane_kind": pl.lane_kind.value,
                "controlling_light": pl.controlling_light,
                "waypoints": [list(map(float, row)) for row in pl.waypoints],
            }
            for pl in sc.scene.polylines
        ],
        "lights": [{"x": lt.x, "y": lt.y, "state": lt.state.value} for lt in sc.scene.lights],
        "ground_truth_trajectories": [
            {"agent_id": ag.id, "states": [list(map(float, row)) for row in traj]}
            for ag, traj in zip(sc.scene.agents, sc.ground_truth)
        ],
    }
    return json.dumps(doc, separators=(",", ":"))


def scenario_from_json(text: str) -> Scenario:
    doc = json.loads(text)
    if doc.get("version") != SCENARIO_FORMAT_VERSION:
        raise InvalidSceneError(f"unsupported scenario version {doc.get('version')}")
    agents = [
        AgentDescriptor(
            id=a["id"],
            kind=AgentKind(a["kind"]),
            length=a["length"],
            width=a["width"],
            height=a["height"],
            history=np.array(a["history"], dtype=np.float64),
            history_valid=np.array(a["history_valid"], dtype=bool),
            valid_now=a["valid_now"],
        )
        for a in doc["agents"]
    ]
    polylines = [
        MapPolyline(
            waypoints=np.array(p["waypoints"], dtype=np.float64),
            lane_kind=LaneKind(p["lane_kind"]),
            controlling_light=p["controlling_light"],
        )
        for p in doc["polylines"]
    ]
    lights = [TrafficLight(l["x"], l["y"], LightState(l["state"])) for l in doc["lights"]]
    gt = np.array([t["states"] for t in doc["ground_truth_trajectories"]], dtype=np.float64)
    return Scenario(SceneContext(agents, polylines, lights, doc["dt"]), gt)


def save_scenario(path, sc: Scenario):
    with open(path, "w", encoding="utf-8") as f:
        f.write(scenario_to_json(sc))
        f.write("\n")


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as f:
        return scenario_from_json(f.read())
