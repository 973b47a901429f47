"""Responsibility-weighted multi-agent CBF safety filter.

For agents with desired accelerations ``u_des`` and responsibilities
``gamma`` the filter solves

    min_{u, eps}  sum_i gamma_i |u_i - u_des_i|^2 + beta1 |u_i|^2
                  + beta2 eps^2 + slack_linear eps
    s.t.          G u + h >= -eps * 1,   |u_i|_inf <= u_bound,   eps >= 0

with one CBF row per agent pair (see :mod:`respcvae.barrier`). A larger
``gamma_i`` makes deviating costlier for agent ``i``.

The linear slack term is an exact penalty: once ``slack_linear`` exceeds
the CBF multiplier, ``eps`` is zero whenever the unrelaxed rows are
feasible. With ``slack_linear=0`` only the quadratic penalty remains and
any active row leaks ``eps = lambda / (2 beta2)``.

All heavy lifting is batched: :func:`project_batch` handles ``B`` scenes
padded to ``N`` agent slots; padded slots get no constraint rows and
resolve to zero control.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .barrier import BarrierConfig, assemble_arrays, pair_list
from .dynamics import AgentPhysState, RelativeState
from .errors import ConvexityError, InvalidInputError

ACTIVATIONS = ("none", "softmax", "clip_zero", "clip_neg_beta", "tanh")
CONV_FLOOR = 1e-3


@dataclass(frozen=True)
class FilterConfig:
    beta1: float = 0.1
    beta2: float = 100.0
    u_bound: float = 4.0
    slack_linear: float = 1000.0
    activation: str = "none"
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    conv_floor: float = CONV_FLOOR
    tol: float = qp.DEFAULT_TOL
    max_iter: int = qp.DEFAULT_MAX_ITER

    def __post_init__(self):
        for name in ("beta1", "beta2", "u_bound", "conv_floor"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise InvalidInputError(f"FilterConfig.{name} must be > 0, got {val}")
        if not (np.isfinite(self.slack_linear) and self.slack_linear >= 0):
            raise InvalidInputError(f"FilterConfig.slack_linear must be >= 0, got {self.slack_linear}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")


@dataclass
class ResponsibilityVector:
    gamma: np.ndarray
    clamped: np.ndarray  # per-agent flag set when the convexity guard clamped the value

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.gamma, dtype=dtype)


@dataclass
class FilterResult:
    u: np.ndarray  # (m*N,)
    epsilon: float
    qp_status: str
    active_pairs: list
    gamma: np.ndarray


@dataclass
class FilterBatch:
    """Batched filter output plus what is needed to differentiate it."""

    u: np.ndarray  # (B, N, 2)
    epsilon: np.ndarray  # (B,)
    status: np.ndarray  # (B,)
    active_rows: np.ndarray  # (B, P) bool
    gamma: np.ndarray  # (B, N) as used in the objective
    u_des: np.ndarray  # (B, N, 2) as used in the objective
    agent_valid: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    sol: qp.BatchSolution


def _softmax(x, mask=None, axis=-1):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def apply_activation(raw, mode, beta1, conv_floor=CONV_FLOOR, guard="raise", mask=None) -> ResponsibilityVector:
    """Map raw decoder outputs to responsibilities.

    ``guard`` controls what happens when ``gamma_i + beta1 < conv_floor``
    (only reachable for ``none`` and ``tanh``): ``"raise"`` raises
    :class:`ConvexityError`, ``"clamp"`` clips to ``-beta1 + conv_floor``
    and sets the per-agent ``clamped`` flag. ``mask`` restricts softmax to
    valid agents; masked entries come back as zero.
    """
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("raw responsibilities must be finite")
    if mode == "none":
        g = raw.copy()
    elif mode == "softmax":
        g = _softmax(raw, mask)
    elif mode == "clip_zero":
        g = np.maximum(raw, 0.0)
    elif mode == "clip_neg_beta":
        g = np.maximum(raw, -beta1 + conv_floor)
    elif mode == "tanh":
        g = np.tanh(raw)
    else:
        raise InvalidInputError(f"unknown activation {mode!r}")
    if mask is not None:
        g = np.where(mask, g, 0.0)
    low = g + beta1 < conv_floor
    if mask is not None:
        low &= np.asarray(mask, bool)
    if low.any():
        if guard == "raise":
            idx = tuple(np.argwhere(low)[0])
            raise ConvexityError(
                f"agent {idx[-1]}: gamma + beta1 = {g[idx] + beta1:.4g} is below the convexity floor {conv_floor}",
                agent=int(idx[-1]),
            )
        g = np.where(low, -beta1 + conv_floor, g)
    return ResponsibilityVector(g, low)


def check_convex(gamma, cfg: FilterConfig, agent_valid=None):
    gamma = np.asarray(gamma, dtype=float)
    bad = gamma + cfg.beta1 < cfg.conv_floor * (1 - 1e-9)
    if agent_valid is not None:
        bad &= np.asarray(agent_valid, bool)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise ConvexityError(
            f"agent {int(idx[-1])}: gamma + beta1 below convexity floor",
            agent=int(idx[-1]),
            scene=int(idx[0]) if bad.ndim > 1 else None,
        )


def build_qp_batch(u_des, pos, vel, gamma, cfg: FilterConfig, agent_valid=None):
    """Assemble the QP data ``(Q, q, A, b)`` for a batch of scenes.

    Variables are ordered ``[u_1, ..., u_N, eps]``; constraint rows are the
    pair rows, then upper box, lower box, then ``eps >= 0``.
    """
    u_des = np.asarray(u_des, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    B, N, m = u_des.shape
    if agent_valid is None:
        agent_valid = np.ones((B, N), dtype=bool)
    agent_valid = np.asarray(agent_valid, dtype=bool)
    # padded agents: unit weight, zero target, no pair rows
    g_eff = np.where(agent_valid, gamma, 1.0)
    ud_eff = np.where(agent_valid[..., None], u_des, 0.0)

    n = m * N + 1
    diag = np.concatenate([np.repeat(2.0 * (g_eff + cfg.beta1), m, axis=1), np.full((B, 1), 2.0 * cfg.beta2)], axis=1)
    Q = np.zeros((B, n, n))
    Q[:, np.arange(n), np.arange(n)] = diag
    q = np.concatenate([(-2.0 * g_eff[..., None] * ud_eff).reshape(B, m * N), np.full((B, 1), cfg.slack_linear)], axis=1)

    G, h, row_valid = assemble_arrays(pos, vel, cfg.barrier, agent_valid)
    P = G.shape[1]
    A = np.zeros((B, P + 2 * m * N + 1, n))
    bb = np.zeros((B, P + 2 * m * N + 1))
    # G u + h >= -eps  <=>  -G u - eps <= h
    A[:, :P, : m * N] = -G
    A[:, :P, -1] = -row_valid.astype(float)
    bb[:, :P] = np.where(row_valid, h, 1.0)
    eye = np.eye(m * N)
    A[:, P : P + m * N, : m * N] = eye
    A[:, P + m * N : P + 2 * m * N, : m * N] = -eye
    bb[:, P : P + 2 * m * N] = cfg.u_bound
    A[:, -1, -1] = -1.0
    return Q, q, A, bb, row_valid


def project_batch(u_des, pos, vel, gamma, cfg: FilterConfig, agent_valid=None) -> FilterBatch:
    u_des = np.asarray(u_des, dtype=float)
    B, N, m = u_des.shape
    if N < 1:
        raise InvalidInputError("no agents")
    if agent_valid is None:
        agent_valid = np.ones((B, N), dtype=bool)
    agent_valid = np.asarray(agent_valid, dtype=bool)
    check_convex(gamma, cfg, agent_valid)
    Q, q, A, b, row_valid = build_qp_batch(u_des, pos, vel, gamma, cfg, agent_valid)
    sol = qp.solve_batch(Q, q, A, b, tol=cfg.tol, max_iter=cfg.max_iter)
    P = row_valid.shape[1]
    u = sol.x[:, : m * N].reshape(B, N, m)
    eps = sol.x[:, -1]
    active = qp.active_set(A, b, sol.x, sol.lam)[:, :P] & row_valid
    g_eff = np.where(agent_valid, np.asarray(gamma, dtype=float), 1.0)
    ud_eff = np.where(agent_valid[..., None], u_des, 0.0)
    return FilterBatch(u, eps, sol.status, active, g_eff, ud_eff, agent_valid, Q, A, b, sol)


def project_vjp_batch(fb: FilterBatch, upstream_u, upstream_eps=None):
    """Gradient of a scalar loss w.r.t. ``gamma`` and ``u_des``.

    ``upstream_u`` is the loss gradient w.r.t. ``fb.u`` (shape ``(B, N, 2)``).
    Returns ``(d_gamma, d_u_des, degenerate)``; entries for padded agents
    are zero.
    """
    upstream_u = np.asarray(upstream_u, dtype=float)
    B, N, m = upstream_u.shape
    up_eps = np.zeros((B, 1)) if upstream_eps is None else np.asarray(upstream_eps, float).reshape(B, 1)
    g = np.concatenate([upstream_u.reshape(B, m * N), up_eps], axis=1)
    grads = qp.solution_vjp_batch(fb.Q, fb.A, fb.b, fb.sol.x, fb.sol.lam, g)
    dQd = np.diagonal(grads.Q, axis1=1, axis2=2)[:, : m * N].reshape(B, N, m)
    dq = grads.q[:, : m * N].reshape(B, N, m)
    d_gamma = 2.0 * dQd.sum(-1) - 2.0 * (dq * fb.u_des).sum(-1)
    d_u_des = -2.0 * fb.gamma[..., None] * dq
    d_gamma = np.where(fb.agent_valid, d_gamma, 0.0)
    d_u_des = np.where(fb.agent_valid[..., None], d_u_des, 0.0)
    return d_gamma, d_u_des, grads.degenerate


def _stack_states(states):
    pos = np.stack([s.position for s in states])
    vel = np.stack([s.velocity for s in states])
    return pos, vel


def _gamma_array(gamma):
    if isinstance(gamma, ResponsibilityVector):
        return np.asarray(gamma.gamma, dtype=float)
    return np.asarray(gamma, dtype=float)


def project(u_des, states, gamma, cfg: FilterConfig) -> FilterResult:
    """Solve the N-agent filter for one scene. ``u_des`` is flat ``(2N,)``."""
    N = len(states)
    if N < 2:
        raise InvalidInputError(f"need at least two agents, got {N}")
    pos, vel = _stack_states(states)
    g = _gamma_array(gamma)
    ud = np.asarray(u_des, dtype=float).reshape(N, -1)
    if not (np.all(np.isfinite(ud)) and np.all(np.isfinite(g))):
        raise InvalidInputError("u_des and gamma must be finite")
    fb = project_batch(ud[None], pos[None], vel[None], g[None], cfg)
    pairs = pair_list(N)
    return FilterResult(
        u=fb.u[0].reshape(-1),
        epsilon=float(fb.epsilon[0]),
        qp_status=str(fb.status[0]),
        active_pairs=[pairs[r] for r in np.flatnonzero(fb.active_rows[0])],
        gamma=g,
    )


def project_pair(u_des, rel: RelativeState, gamma, cfg: FilterConfig) -> FilterResult:
    """Two-agent filter expressed in relative coordinates."""
    a = AgentPhysState(np.zeros(2), np.zeros(2))
    b = AgentPhysState(rel.dp, rel.dv)
    return project(u_des, [a, b], gamma, cfg)


def project_vjp(u_des, states, gamma, cfg: FilterConfig, upstream):
    """Gradients of ``upstream . u`` w.r.t. ``gamma`` and ``u_des``.

    Returns ``(d_gamma, d_u_des, degenerate)`` for a single scene.
    """
    N = len(states)
    pos, vel = _stack_states(states)
    ud = np.asarray(u_des, dtype=float).reshape(N, -1)
    g = _gamma_array(gamma)
    fb = project_batch(ud[None], pos[None], vel[None], g[None], cfg)
    dg, dud, deg = project_vjp_batch(fb, np.asarray(upstream, float).reshape(1, N, -1))
    return dg[0], dud[0].reshape(-1), bool(deg[0])
