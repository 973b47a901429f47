"""Planar double-integrator agents.

State is position and velocity in the plane, control is acceleration.
Integration is exact for piecewise-constant acceleration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

STATE_DIM = 4
CONTROL_DIM = 2


def _vec2(x, name):
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (2,):
        raise InvalidInputError(f"{name} must have 2 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite components: {arr}")
    return arr


@dataclass(frozen=True)
class AgentPhysState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _vec2(self.position, "position"))
        object.__setattr__(self, "velocity", _vec2(self.velocity, "velocity"))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class Control:
    acceleration: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "acceleration", _vec2(self.acceleration, "acceleration"))


@dataclass(frozen=True)
class RelativeState:
    """State of agent j seen from agent i: ``dp = p_j - p_i``, ``dv = v_j - v_i``."""

    dp: np.ndarray
    dv: np.ndarray

    def __neg__(self):
        return RelativeState(-self.dp, -self.dv)


def step(state: AgentPhysState, u, dt: float) -> AgentPhysState:
    """Advance one agent by ``dt`` seconds under constant acceleration ``u``."""
    if not np.isfinite(dt) or dt <= 0:
        raise InvalidInputError(f"dt must be positive and finite, got {dt}")
    acc = u.acceleration if isinstance(u, Control) else _vec2(u, "u")
    pos, vel = step_arrays(state.position, state.velocity, acc, dt)
    return AgentPhysState(pos, vel)


def step_arrays(pos, vel, acc, dt):
    """Vectorised exact update on arrays of shape ``(..., 2)``."""
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    new_pos = pos + vel * dt + 0.5 * acc * dt * dt
    new_vel = vel + acc * dt
    return new_pos, new_vel


def relative_state(a: AgentPhysState, b: AgentPhysState) -> RelativeState:
    return RelativeState(b.position - a.position, b.velocity - a.velocity)
