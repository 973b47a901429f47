"""Pairwise collision barrier and the joint multi-agent CBF inequality.

The barrier for a pair with relative state ``(dp, dv)`` is

    b = |dp|^2 - d_min^2 + sigma * dp.dv

which has relative degree one under double-integrator relative dynamics:

    db/dt = 2 dp.dv + sigma * (|dv|^2 + dp.(u_j - u_i)).

The CBF condition ``db/dt + alpha0 * b >= 0`` is therefore affine in the
stacked controls, giving one row ``g_i u_i + g_j u_j + h >= 0`` per pair.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .dynamics import CONTROL_DIM, AgentPhysState, RelativeState, relative_state
from .errors import InvalidInputError


@dataclass(frozen=True)
class BarrierConfig:
    d_min: float = 2.0
    sigma: float = 1.0
    alpha0: float = 1.0

    def __post_init__(self):
        for name in ("d_min", "sigma", "alpha0"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise InvalidInputError(f"BarrierConfig.{name} must be > 0, got {val}")


@dataclass
class JointConstraint:
    """Rows of ``G u + h >= 0`` in lexicographic pair order."""

    G: np.ndarray
    h: np.ndarray
    pair_index: list


def barrier_value(rel: RelativeState, cfg: BarrierConfig) -> float:
    dp, dv = np.asarray(rel.dp), np.asarray(rel.dv)
    return float(dp @ dp - cfg.d_min**2 + cfg.sigma * (dp @ dv))


def pairwise_row(rel: RelativeState, cfg: BarrierConfig):
    """Return ``(g_i, g_j, h)`` for the pair whose relative state is ``rel``."""
    dp, dv = np.asarray(rel.dp, dtype=float), np.asarray(rel.dv, dtype=float)
    b = dp @ dp - cfg.d_min**2 + cfg.sigma * (dp @ dv)
    h = 2.0 * (dp @ dv) + cfg.sigma * (dv @ dv) + cfg.alpha0 * b
    return -cfg.sigma * dp, cfg.sigma * dp, float(h)


def pair_list(n: int):
    return list(combinations(range(n), 2))


def assemble(states, cfg: BarrierConfig) -> JointConstraint:
    n = len(states)
    if n < 2:
        raise InvalidInputError(f"need at least two agents, got {n}")
    pairs = pair_list(n)
    m = CONTROL_DIM
    G = np.zeros((len(pairs), m * n))
    h = np.zeros(len(pairs))
    for r, (i, j) in enumerate(pairs):
        gi, gj, hr = pairwise_row(relative_state(states[i], states[j]), cfg)
        G[r, m * i : m * i + m] = gi
        G[r, m * j : m * j + m] = gj
        h[r] = hr
    return JointConstraint(G, h, pairs)


def assemble_arrays(pos, vel, cfg: BarrierConfig, agent_valid=None):
    """Batched assembly.

    ``pos`` and ``vel`` have shape ``(B, N, 2)``. Returns ``G`` of shape
    ``(B, P, 2N)``, ``h`` of shape ``(B, P)`` and a ``(B, P)`` boolean mask
    of rows whose two agents are both valid. Rows involving a padded agent
    are zeroed.
    """
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    B, n, m = pos.shape
    pairs = pair_list(n)
    if not pairs:
        return np.zeros((B, 0, m * n)), np.zeros((B, 0)), np.zeros((B, 0), bool)
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    dp = pos[:, jj] - pos[:, ii]
    dv = vel[:, jj] - vel[:, ii]
    pdv = np.einsum("bpk,bpk->bp", dp, dv)
    b = np.einsum("bpk,bpk->bp", dp, dp) - cfg.d_min**2 + cfg.sigma * pdv
    h = 2.0 * pdv + cfg.sigma * np.einsum("bpk,bpk->bp", dv, dv) + cfg.alpha0 * b
    G = np.zeros((B, len(pairs), n, m))
    rows = np.arange(len(pairs))
    G[:, rows, ii, :] = -cfg.sigma * dp
    G[:, rows, jj, :] = cfg.sigma * dp
    if agent_valid is None:
        row_valid = np.ones((B, len(pairs)), dtype=bool)
    else:
        agent_valid = np.asarray(agent_valid, dtype=bool)
        row_valid = agent_valid[:, ii] & agent_valid[:, jj]
        G = G * row_valid[:, :, None, None]
        h = np.where(row_valid, h, 0.0)
    return G.reshape(B, len(pairs), n * m), h, row_valid


def barrier_values_arrays(pos, vel, cfg: BarrierConfig):
    """Barrier of every pair, shape ``(..., P)``."""
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    pairs = pair_list(pos.shape[-2])
    ii = [p[0] for p in pairs]
    jj = [p[1] for p in pairs]
    dp = pos[..., jj, :] - pos[..., ii, :]
    dv = vel[..., jj, :] - vel[..., ii, :]
    return (dp * dp).sum(-1) - cfg.d_min**2 + cfg.sigma * (dp * dv).sum(-1)


def states_from_arrays(pos, vel):
    return [AgentPhysState(p, v) for p, v in zip(pos, vel)]
