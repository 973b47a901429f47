"""Agent-time token sequences and a masked self-attention context encoder.

A scene is stored as arrays indexed ``[t, n]`` (time, agent slot) with a
validity mask. Flattening is time-major: all agents at the first step,
then all agents at the next step, and so on.

Token features are ``[type, px, py, vx, vy, heading]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data.agents import select_agents
from .dynamics import AgentPhysState
from .errors import InvalidInputError
from .nn import autodiff as ad
from .nn.layers import AttentionSpec, MLPSpec, attention_block, init_attention, init_mlp, mlp_forward, time_embed

TOKEN_FEATURES = ("type", "px", "py", "vx", "vy", "heading")
F_TYPE, F_PX, F_PY, F_VX, F_VY, F_HEADING = range(6)


@dataclass
class AgentTrack:
    """History of one agent on integer time steps ``0 .. T_max-1``."""

    agent_id: int
    agent_type: int
    times: np.ndarray
    position: np.ndarray  # (k, 2)
    velocity: np.ndarray  # (k, 2)
    heading: np.ndarray | None = None  # (k,)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=int)
        self.position = np.asarray(self.position, dtype=float).reshape(-1, 2)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(-1, 2)
        if self.heading is None:
            self.heading = np.arctan2(self.velocity[:, 1], self.velocity[:, 0])
        self.heading = np.asarray(self.heading, dtype=float)
        if not (len(self.times) == len(self.position) == len(self.velocity) == len(self.heading)):
            raise InvalidInputError(f"track {self.agent_id}: field lengths disagree")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidInputError(f"track {self.agent_id}: times must increase")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise InvalidInputError(f"track {self.agent_id}: non-finite state")


@dataclass
class SceneSequence:
    tokens: np.ndarray  # (T_max, N_max, F)
    valid: np.ndarray  # (T_max, N_max)
    agent_ids: np.ndarray  # (N_max,), -1 for empty slots
    pos: np.ndarray  # (N_max, 2) state at the final step
    vel: np.ndarray  # (N_max, 2)
    n_agents: int
    agent_valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.agent_valid is None:
            self.agent_valid = np.arange(self.tokens.shape[1]) < self.n_agents

    def flat_tokens(self):
        """Time-major flattening: ``(T_max * N_max, F)`` and its mask."""
        T, N, F = self.tokens.shape
        return self.tokens.reshape(T * N, F), self.valid.reshape(T * N)

    def current_states(self):
        return [AgentPhysState(self.pos[n], self.vel[n]) for n in range(self.n_agents)]


def _wrap_angle(a):
    # map to (-pi, pi]
    return np.pi - np.mod(np.pi - a, 2 * np.pi)


def flatten_scene(tracks, t_max, n_max=None, ego_id=None) -> SceneSequence:
    """Pack agent tracks into a padded ``SceneSequence``.

    Only agents present at the final step ``t_max - 1`` get a slot. With
    more such agents than ``n_max`` the ego (default: first track) keeps
    its nearest neighbours. Slot order follows the input order, ego first.
    """
    if not tracks:
        raise InvalidInputError("empty scene")
    t_last = t_max - 1
    present = [tr for tr in tracks if tr.times.size and tr.times[-1] == t_last]
    if not present:
        raise InvalidInputError(f"no agent present at the final step {t_last}")
    if np.any([np.any((tr.times < 0) | (tr.times > t_last)) for tr in present]):
        raise InvalidInputError("track time outside [0, t_max)")
    n_max = len(present) if n_max is None else n_max
    if len(present) > n_max:
        ego = present[0].agent_id if ego_id is None else ego_id
        cur = np.array([tr.position[-1] for tr in present])
        ids = np.array([tr.agent_id for tr in present])
        keep = select_agents(cur, ids, ego, n_max)
        by_id = {tr.agent_id: tr for tr in present}
        present = [by_id[i] for i in keep]
    tokens = np.zeros((t_max, n_max, len(TOKEN_FEATURES)))
    valid = np.zeros((t_max, n_max), dtype=bool)
    agent_ids = np.full(n_max, -1)
    pos = np.zeros((n_max, 2))
    vel = np.zeros((n_max, 2))
    for n, tr in enumerate(present):
        agent_ids[n] = tr.agent_id
        tokens[tr.times, n, F_TYPE] = tr.agent_type
        tokens[tr.times, n, F_PX : F_PY + 1] = tr.position
        tokens[tr.times, n, F_VX : F_VY + 1] = tr.velocity
        tokens[tr.times, n, F_HEADING] = _wrap_angle(tr.heading)
        valid[tr.times, n] = True
        pos[n] = tr.position[-1]
        vel[n] = tr.velocity[-1]
    return SceneSequence(tokens, valid, agent_ids, pos, vel, len(present))


@dataclass(frozen=True)
class EncoderConfig:
    t_max: int = 10
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ff_hidden: int = 64
    activation: str = "tanh"
    layer_norm: bool = False
    pos_scale: float = 10.0
    vel_scale: float = 5.0
    ordered_reduction: bool = False

    @property
    def attention(self):
        return AttentionSpec(self.d_model, self.n_heads, self.ff_hidden, self.activation, self.layer_norm,
                             self.ordered_reduction)

    @property
    def embed(self):
        return MLPSpec(7, (self.d_model,), self.d_model, self.activation)


def init_encoder(store, cfg: EncoderConfig, rng, prefix="enc"):
    init_mlp(store, f"{prefix}.embed", cfg.embed, rng)
    for layer in range(cfg.n_layers):
        init_attention(store, f"{prefix}.att{layer}", cfg.attention, rng)


def token_inputs(tokens, cfg: EncoderConfig):
    """Scaled per-token input features ``(..., 7)``."""
    t = np.asarray(tokens, dtype=float)
    h = t[..., F_HEADING]
    return np.concatenate(
        [
            t[..., F_TYPE : F_TYPE + 1],
            t[..., F_PX : F_PY + 1] / cfg.pos_scale,
            t[..., F_VX : F_VY + 1] / cfg.vel_scale,
            np.sin(h)[..., None],
            np.cos(h)[..., None],
        ],
        axis=-1,
    )


def readout_index(valid):
    """Per agent, the last valid time step (0 when the agent has none)."""
    T = valid.shape[-2]
    t_idx = np.arange(T)[:, None]
    return np.where(valid, t_idx, -1).max(axis=-2).clip(min=0)


def encode_context(P, cfg: EncoderConfig, tokens, valid, prefix="enc", interaction=True):
    """Per-agent features ``(B, N, d_model)`` from batched token arrays.

    ``tokens`` is ``(B, T, N, F)`` and ``valid`` is ``(B, T, N)``. Valid
    tokens attend to every valid token (or, with ``interaction=False``,
    only to tokens of the same agent). Each agent is read out at its last
    valid step; agents without any valid token get zero features.
    """
    tokens = np.asarray(tokens, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    B, T, N, _ = tokens.shape
    if T > cfg.t_max:
        raise InvalidInputError(f"history length {T} exceeds t_max {cfg.t_max}")
    x_in = np.where(valid[..., None], token_inputs(tokens, cfg), 0.0)
    temb = time_embed(np.arange(T), cfg.d_model, cfg.t_max)[None, :, None, :]
    h = mlp_forward(P, f"{prefix}.embed", cfg.embed, x_in) + temb
    h = h * valid[..., None]
    S = T * N
    h = ad.reshape(h, (B, S, cfg.d_model))
    vflat = valid.reshape(B, S)
    mask = vflat[:, :, None] & vflat[:, None, :]
    agent_of = np.tile(np.arange(N), T)
    same = np.broadcast_to(agent_of[:, None] == agent_of[None, :], (B, S, S))
    if not interaction:
        mask = mask & same
    for layer in range(cfg.n_layers):
        h = attention_block(P, f"{prefix}.att{layer}", cfg.attention, h, mask, same)
    t_read = readout_index(valid)  # (B, N)
    flat_idx = t_read * N + np.arange(N)[None, :]
    out = h[np.arange(B)[:, None], flat_idx]
    has_any = valid.any(axis=1)
    return out * has_any[..., None]
