"""Agent selection around an ego vehicle and the desired-control policy."""
from __future__ import annotations

import numpy as np

from ..dynamics import AgentPhysState, Control
from ..errors import InvalidInputError

SPEED_EPS = 0.1


def select_agents(positions, ids, ego_id, n_max):
    """Return the ids of the ego plus its ``n_max - 1`` nearest neighbours.

    ``positions`` is ``(M, 2)`` at the current time, ``ids`` the matching
    track ids. Ties in distance go to the lower id. The ego comes first,
    the rest by increasing distance.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    ids = np.asarray(ids)
    if n_max < 1:
        raise InvalidInputError("n_max must be >= 1")
    hit = np.flatnonzero(ids == ego_id)
    if hit.size == 0:
        raise InvalidInputError(f"ego {ego_id} is not present")
    ego = hit[0]
    others = np.array([k for k in range(len(ids)) if k != ego], dtype=int)
    if others.size == 0:
        return [ids[ego].item()]
    d = np.linalg.norm(positions[others] - positions[ego], axis=1)
    order = np.lexsort((ids[others], d))
    keep = others[order[: n_max - 1]]
    return [ids[ego].item()] + [ids[k].item() for k in keep]


def desired_control(state: AgentPhysState, target_speed, gain, u_bound=None, heading=None) -> Control:
    """Proportional speed tracking along the direction of travel.

    The direction is the velocity direction when moving faster than
    ``SPEED_EPS``, otherwise the supplied ``heading`` (radians).
    """
    if not gain > 0:
        raise InvalidInputError("gain must be > 0")
    u = desired_control_arrays(state.position[None], state.velocity[None], target_speed, gain, u_bound,
                               None if heading is None else np.array([heading]))
    return Control(u[0])


def desired_control_arrays(pos, vel, target_speed, gain, u_bound=None, heading=None):
    """Vectorised :func:`desired_control` over leading axes of ``vel``."""
    vel = np.asarray(vel, dtype=float)
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    if heading is None:
        fallback = np.zeros_like(vel)
        fallback[..., 0] = 1.0
    else:
        heading = np.asarray(heading, dtype=float)
        fallback = np.stack([np.cos(heading), np.sin(heading)], axis=-1)
    direction = np.where(speed > SPEED_EPS, vel / np.maximum(speed, 1e-12), fallback)
    u = gain * (np.asarray(target_speed, dtype=float)[..., None] * direction - vel)
    if u_bound is not None:
        u = np.clip(u, -u_bound, u_bound)
    return u
