"""Two-agent head-on corridor data with a known bimodal responsibility law.

Agent 0 starts at the origin moving along +x, agent 1 starts ahead at
``(gap, offset)`` moving along -x, and both want to keep accelerating
towards each other. Each datum draws responsibilities from a two-mode
Gaussian mixture whose means drift apart linearly with the x-gap, runs the
safety filter with them and records the filtered controls. The drawn
responsibilities are kept in ``Dataset.truth`` for evaluation only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from ..qp import OPTIMAL
from ..safety_filter import FilterConfig, project_batch
from ..sequence import F_HEADING, F_PX, F_VX
from .dataset import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorridorConfig:
    x_gap_range: tuple = (5.0, 12.0)
    approach_speed_range: tuple = (0.5, 2.0)
    lateral_offset_range: tuple = (-0.5, 0.5)
    mode_means: tuple = ((0.8, 0.2), (0.2, 0.8))
    mode_std: float = 0.05
    skew_slope: float = 0.01
    mixture_weight: float = 0.5
    u_des_magnitude: float = 1.0
    gamma_floor: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "mode_means", tuple(tuple(float(v) for v in m) for m in self.mode_means))
        for name in ("x_gap_range", "approach_speed_range", "lateral_offset_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidInputError(f"{name}: low end exceeds high end")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not self.mode_std >= 0:
            raise InvalidInputError("mode_std must be >= 0")
        if not 0 <= self.mixture_weight <= 1:
            raise InvalidInputError("mixture_weight must lie in [0, 1]")
        if len(self.mode_means) != 2 or any(len(m) != 2 for m in self.mode_means):
            raise InvalidInputError("mode_means must be two pairs")


def skewed_mode_means(dp_x, cfg: CorridorConfig):
    """Mode means at x-gap ``dp_x``: shape ``(..., 2 modes, 2 agents)``.

    Mode 0 moves its first component up and its second down by
    ``skew_slope * |dp_x|``; mode 1 does the mirror image. Means are
    clamped to [0, 1].
    """
    s = cfg.skew_slope * np.abs(np.asarray(dp_x, dtype=float))[..., None]
    m0 = np.asarray(cfg.mode_means[0]) + np.concatenate([s, -s], -1)
    m1 = np.asarray(cfg.mode_means[1]) + np.concatenate([-s, s], -1)
    return np.clip(np.stack([m0, m1], axis=-2), 0.0, 1.0)


def sample_synthetic_gamma(rel, cfg: CorridorConfig, rng, size=None):
    """Draw responsibilities for relative state ``rel`` (one pair, or
    ``size`` independent draws at the same state)."""
    dp_x = np.asarray(rel.dp, dtype=float)[0]
    n = 1 if size is None else int(size)
    g, _ = sample_gamma_arrays(np.full(n, dp_x), cfg, rng)
    return g[0] if size is None else g


def sample_gamma_arrays(dp_x, cfg: CorridorConfig, rng):
    """Vectorised draws: returns ``(gamma (K, 2), mode (K,))``."""
    dp_x = np.asarray(dp_x, dtype=float)
    means = skewed_mode_means(dp_x, cfg)
    mode = (rng.uniform(size=dp_x.shape) >= cfg.mixture_weight).astype(int)
    mu = np.take_along_axis(means, mode[:, None, None], axis=1)[:, 0]
    return mu + cfg.mode_std * rng.standard_normal(mu.shape), mode


def gamma_density(g1, dp_x, cfg: CorridorConfig):
    """Analytic density of the first agent's responsibility at ``dp_x``
    (before flooring)."""
    means = skewed_mode_means(dp_x, cfg)[..., 0]
    g1 = np.asarray(g1, dtype=float)[..., None]
    w = np.array([cfg.mixture_weight, 1 - cfg.mixture_weight])
    z = (g1 - means) / cfg.mode_std
    return (w * np.exp(-0.5 * z * z) / (cfg.mode_std * np.sqrt(2 * np.pi))).sum(-1)


def corridor_states(gap, offset, speed0, speed1):
    """Positions and velocities ``(K, 2, 2)`` for the corridor geometry."""
    K = len(gap)
    pos = np.zeros((K, 2, 2))
    vel = np.zeros((K, 2, 2))
    pos[:, 1, 0] = gap
    pos[:, 1, 1] = offset
    vel[:, 0, 0] = speed0
    vel[:, 1, 0] = -np.asarray(speed1)
    return pos, vel


def corridor_u_des(K, cfg: CorridorConfig):
    ud = np.zeros((K, 2, 2))
    ud[:, 0, 0] = cfg.u_des_magnitude
    ud[:, 1, 0] = -cfg.u_des_magnitude
    return ud


def make_scenes(pos, vel, u_des, u, episode=None, meta=None, truth=None) -> Dataset:
    """Wrap single-step two-agent states as a dataset (history length 1)."""
    K, N, _ = pos.shape
    tokens = np.zeros((K, 1, N, 6))
    tokens[:, 0, :, F_PX : F_PX + 2] = pos
    tokens[:, 0, :, F_VX : F_VX + 2] = vel
    tokens[:, 0, :, F_HEADING] = np.arctan2(vel[..., 1], vel[..., 0])
    return Dataset(
        tokens=tokens,
        valid=np.ones((K, 1, N), dtype=bool),
        pos=pos,
        vel=vel,
        agent_valid=np.ones((K, N), dtype=bool),
        u_des=u_des,
        u=u,
        episode=np.arange(K) if episode is None else episode,
        agent_ids=np.tile(np.arange(N), (K, 1)),
        meta=meta or {},
        truth=truth or {},
    )


def filtered_controls(pos, vel, u_des, gamma, filter_cfg: FilterConfig, chunk=2048):
    """Run the filter in chunks; returns ``(u, eps, ok)``."""
    K = len(pos)
    u = np.zeros_like(u_des)
    eps = np.zeros(K)
    ok = np.zeros(K, dtype=bool)
    for s in range(0, K, chunk):
        sl = slice(s, s + chunk)
        fb = project_batch(u_des[sl], pos[sl], vel[sl], gamma[sl], filter_cfg)
        u[sl], eps[sl], ok[sl] = fb.u, fb.epsilon, fb.status == OPTIMAL
    return u, eps, ok


def gen_corridor_dataset(cfg: CorridorConfig, K: int, filter_cfg: FilterConfig, rng, seed=None) -> Dataset:
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    parts, kept, skipped = [], 0, 0
    while kept < K:
        n = K - kept
        gap = rng.uniform(*cfg.x_gap_range, size=n)
        offset = rng.uniform(*cfg.lateral_offset_range, size=n)
        s0 = rng.uniform(*cfg.approach_speed_range, size=n)
        s1 = rng.uniform(*cfg.approach_speed_range, size=n)
        gamma, mode = sample_gamma_arrays(gap, cfg, rng)
        gamma = np.maximum(gamma, cfg.gamma_floor)
        pos, vel = corridor_states(gap, offset, s0, s1)
        ud = corridor_u_des(n, cfg)
        u, eps, ok = filtered_controls(pos, vel, ud, gamma, filter_cfg)
        if not ok.all():
            skipped += int((~ok).sum())
            log.warning("corridor: skipped %d data after filter failure", int((~ok).sum()))
        idx = np.flatnonzero(ok)
        parts.append((pos[idx], vel[idx], ud[idx], u[idx], gamma[idx], mode[idx], eps[idx]))
        kept += idx.size
    pos, vel, ud, u, gamma, mode, eps = (np.concatenate(x) for x in zip(*parts))
    meta = {
        "generator": "corridor",
        "config": _cfg_dict(cfg),
        "filter": {"beta1": filter_cfg.beta1, "beta2": filter_cfg.beta2, "u_bound": filter_cfg.u_bound},
        "seed": seed,
        "count": K,
        "skipped": skipped,
    }
    return make_scenes(pos, vel, ud, u, meta=meta, truth={"gamma": gamma, "mode": mode, "epsilon": eps})


def _cfg_dict(cfg):
    from dataclasses import asdict

    return asdict(cfg)
