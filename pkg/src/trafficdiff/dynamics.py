"""Unicycle dynamics shared by all agent types.

Forward model, inverse model, action normalization, and multi-step rollout.
State layout used throughout the package: ``[x, y, psi, vx, vy]`` with psi
wrapped to (-pi, pi]. Speed may go negative after strong braking (the update
reads it back through sqrt, so a negative speed means reversing along the
heading for one step); we do not clamp so that rollout/inverse round-trips
stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AgentState",
    "Action",
    "ActionNormalization",
    "Trajectory",
    "ControlSequence",
    "InvalidInputError",
    "wrap_angle",
    "step_forward",
    "rollout",
    "inverse_dynamics",
    "normalize",
    "denormalize",
    "rollout_array",
    "inverse_dynamics_array",
    "repeat_actions",
    "compress_actions",
]


class InvalidInputError(ValueError):
    """Raised when a dynamics operation receives malformed input."""


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]; values already in range pass through exactly."""
    a = np.asarray(a)
    out_of_range = (a > math.pi) | (a <= -math.pi)
    wrapped = -(np.mod(-a + math.pi, 2.0 * math.pi) - math.pi)
    return np.where(out_of_range, wrapped, a)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    psi: float
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.vx, self.vy], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "AgentState":
        x, y, psi, vx, vy = (float(v) for v in arr)
        return AgentState(x, y, psi, vx, vy)


@dataclass(frozen=True)
class Action:
    accel: float
    yaw_rate: float


@dataclass(frozen=True)
class ActionNormalization:
    """Scales dividing physical actions into network units."""

    accel_scale: float = 1.0
    yaw_scale: float = 0.15

    def __post_init__(self):
        if not (self.accel_scale > 0 and self.yaw_scale > 0):
            raise InvalidInputError("normalization scales must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.accel_scale, self.yaw_scale], dtype=np.float64)


@dataclass
class Trajectory:
    states: list[AgentState]
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if len(self.states) < 1:
            raise InvalidInputError("trajectory needs at least one state")

    def as_array(self) -> np.ndarray:
        return np.stack([s.as_array() for s in self.states])

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class ControlSequence:
    actions: list[Action]
    normalized: bool = False

    def as_array(self) -> np.ndarray:
        if not self.actions:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([[a.accel, a.yaw_rate] for a in self.actions], dtype=np.float64)

    @staticmethod
    def from_array(arr, normalized: bool = False) -> "ControlSequence":
        return ControlSequence(
            [Action(float(r[0]), float(r[1])) for r in np.asarray(arr)], normalized
        )

    def __len__(self) -> int:
        return len(self.actions)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("non-finite value in dynamics input")


def step_forward(state: AgentState, action: Action, dt: float) -> AgentState:
    """One unicycle step.

    Position advances with the pre-step velocity components, then heading,
    then speed, then the velocity components are rebuilt from the new speed
    and heading.
    """
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    _check_finite(state.as_array(), action.accel, action.yaw_rate)
    x = state.x + state.vx * dt
    y = state.y + state.vy * dt
    psi = float(wrap_angle(state.psi + action.yaw_rate * dt))
    v = math.hypot(state.vx, state.vy) + action.accel * dt
    return AgentState(x, y, psi, v * math.cos(psi), v * math.sin(psi))


def rollout(initial: AgentState, controls: ControlSequence, dt: float) -> Trajectory:
    """Chain step_forward over a sequence of physical (denormalized) actions."""
    if controls.normalized:
        raise InvalidInputError("rollout expects denormalized controls")
    states = [initial]
    for action in controls.actions:
        states.append(step_forward(states[-1], action, dt))
    return Trajectory(states, dt)


def inverse_dynamics(traj: Trajectory) -> ControlSequence:
    """Recover per-step accel and yaw rate from a state trajectory.

    Heading differences take the shortest signed path so crossings of the
    +-pi seam do not produce spurious yaw rates.
    """
    if len(traj) < 2:
        raise InvalidInputError("inverse dynamics needs at least two states")
    arr = traj.as_array()
    accel, yaw = inverse_dynamics_array(arr, traj.dt)
    return ControlSequence(
        [Action(float(a), float(w)) for a, w in zip(accel, yaw)], normalized=False
    )


def normalize(controls: ControlSequence, norm: ActionNormalization) -> ControlSequence:
    if controls.normalized:
        return controls
    arr = controls.as_array() / norm.as_array()
    return ControlSequence.from_array(arr, normalized=True)


def denormalize(controls: ControlSequence, norm: ActionNormalization) -> ControlSequence:
    if not controls.normalized:
        return controls
    arr = controls.as_array() * norm.as_array()
    return ControlSequence.from_array(arr, normalized=False)


# ---------------------------------------------------------------------------
# Vectorized forms. Leading dimensions are arbitrary batch axes; the time
# axis is always second to last for actions (B..., T, 2) and states
# (B..., T+1, 5).
# ---------------------------------------------------------------------------


def rollout_array(initial: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
    """Batched rollout. initial (..., 5), actions (..., T, 2) -> (..., T+1, 5)."""
    initial = np.asarray(initial, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    if not (np.all(np.isfinite(initial)) and np.all(np.isfinite(actions))):
        raise InvalidInputError("non-finite value in dynamics input")
    T = actions.shape[-2]
    out = np.empty(initial.shape[:-1] + (T + 1, 5), dtype=np.float64)
    out[..., 0, :] = initial
    x = initial[..., 0].copy()
    y = initial[..., 1].copy()
    psi = initial[..., 2].copy()
    vx = initial[..., 3].copy()
    vy = initial[..., 4].copy()
    for t in range(T):
        x = x + vx * dt
        y = y + vy * dt
        psi = wrap_angle(psi + actions[..., t, 1] * dt)
        v = np.hypot(vx, vy) + actions[..., t, 0] * dt
        vx = v * np.cos(psi)
        vy = v * np.sin(psi)
        out[..., t + 1, 0] = x
        out[..., t + 1, 1] = y
        out[..., t + 1, 2] = psi
        out[..., t + 1, 3] = vx
        out[..., t + 1, 4] = vy
    return out


def inverse_dynamics_array(states: np.ndarray, dt: float):
    """Batched inverse dynamics. states (..., T+1, 5) -> (accel, yaw) each (..., T)."""
    states = np.asarray(states, dtype=np.float64)
    if states.shape[-2] < 2:
        raise InvalidInputError("inverse dynamics needs at least two states")
    speed = np.hypot(states[..., 3], states[..., 4])
    accel = (speed[..., 1:] - speed[..., :-1]) / dt
    dpsi = wrap_angle(states[..., 1:, 2] - states[..., :-1, 2])
    return accel, dpsi / dt


def repeat_actions(actions: np.ndarray, repeat: int) -> np.ndarray:
    """Expand (..., T_f, 2) to (..., T_f*repeat, 2) by holding each action."""
    return np.repeat(np.asarray(actions), repeat, axis=-2)


def compress_actions(actions: np.ndarray, repeat: int) -> np.ndarray:
    """Block-average (..., T, 2) down to (..., T/repeat, 2)."""
    actions = np.asarray(actions)
    T = actions.shape[-2]
    if T % repeat != 0:
        raise InvalidInputError(f"horizon {T} not divisible by action repeat {repeat}")
    shape = actions.shape[:-2] + (T // repeat, repeat, 2)
    return actions.reshape(shape).mean(axis=-2)
