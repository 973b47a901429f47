"""Rollouts, displacement metrics, density grids and exports.

Rollouts predict all agents of a scene jointly: at every step the current
history window is encoded, a latent is drawn from the prior, the decoded
responsibilities go through the safety filter around the desired controls,
and the resulting accelerations are integrated exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from . import cvae
from .dynamics import step_arrays
from .errors import InvalidInputError
from .nn import autodiff as ad
from .qp import OPTIMAL
from .safety_filter import FilterConfig
from .sequence import F_HEADING, F_PX, F_VX
from .data.agents import desired_control_arrays


@dataclass(frozen=True)
class PolicyConfig:
    """Desired-control policy used while rolling out.

    ``kind="feedback"`` recomputes the speed-tracking control every step;
    ``kind="recorded"`` holds each scene's recorded desired control.
    """

    kind: str = "feedback"
    target_speed: float = 10.0
    gain: float = 0.5
    u_bound: float = 4.0

    def __post_init__(self):
        if self.kind not in ("feedback", "recorded"):
            raise InvalidInputError(f"unknown policy kind {self.kind!r}")


@dataclass
class RolloutResult:
    positions: np.ndarray  # (S, B, H, N, 2)
    gamma: np.ndarray | None  # (S, B, H, N)
    epsilon: np.ndarray  # (S, B, H)
    failed: np.ndarray  # (S, B)
    dt: float


class _Scenes:
    """Mutable view of a batch used while rolling out."""

    def __init__(self, **kw):
        self.__dict__.update(kw)


def _headings(batch):
    t_read = np.where(batch.valid, np.arange(batch.valid.shape[1])[None, :, None], -1).max(1).clip(min=0)
    B, N = t_read.shape
    return batch.tokens[np.arange(B)[:, None], t_read, np.arange(N)[None, :], F_HEADING]


def rollout(P, model, batch, horizon_steps, dt, n_samples, cfg: FilterConfig, rng, policy=PolicyConfig(),
            mode="model", controls_fn=None) -> RolloutResult:
    """Sample ``n_samples`` joint futures for every scene of ``batch``.

    ``mode`` is ``"model"`` (CVAE, whichever output head it has) or
    ``"desired"`` (follow the desired controls, no model and no filter).
    ``rng`` is a generator, split into one child stream per sample, or a
    sequence of ``n_samples`` per-sample generators. Sample ``i`` only
    consumes stream ``i``, so splitting the streams splits the rollout.
    A sample whose filter fails is frozen in place and flagged.
    """
    if horizon_steps < 0 or n_samples < 0:
        raise InvalidInputError("horizon and sample count must be >= 0")
    av = np.asarray(batch.agent_valid, bool)
    B, N = av.shape
    S = n_samples
    if horizon_steps == 0 or S == 0:
        return RolloutResult(np.zeros((S, B, horizon_steps, N, 2)), None, np.zeros((S, B, horizon_steps)),
                             np.zeros((S, B), bool), dt)
    streams = list(rng.spawn(S)) if isinstance(rng, np.random.Generator) else list(rng)
    if len(streams) != S:
        raise InvalidInputError(f"expected {S} sample streams, got {len(streams)}")
    tb = cvae.tile_batch(batch, S)
    heading = np.concatenate([_headings(batch)] * S)
    avt = np.concatenate([av] * S)
    pos = np.where(avt[..., None], tb.pos, 0.0).copy()
    vel = np.where(avt[..., None], tb.vel, 0.0).copy()
    tokens, valid = tb.tokens.copy(), tb.valid.copy()
    out_pos = np.zeros((S * B, horizon_steps, N, 2))
    out_gamma = np.zeros((S * B, horizon_steps, N)) if mode == "model" and model.output == "gamma" else None
    out_eps = np.zeros((S * B, horizon_steps))
    failed = np.zeros(S * B, dtype=bool)
    for h in range(horizon_steps):
        if policy.kind == "recorded":
            ud = tb.u_des
        else:
            ud = desired_control_arrays(pos, vel, policy.target_speed, policy.gain, policy.u_bound, heading)
        ud = np.where(avt[..., None], ud, 0.0)
        scenes = _Scenes(tokens=tokens, valid=valid, pos=pos, vel=vel, agent_valid=avt, u_des=ud)
        if mode == "desired":
            u = ud
        elif mode == "model":
            ctx = cvae.context(P, model, scenes)
            z_noise, g_noise = _step_noise(model, streams, B, N)
            z = ad.const(cvae._prior_latent(P, model, ctx, None, z_noise))
            rec = {}
            u_hat, gamma, eps = cvae.predict_controls(P, model, scenes, z, ctx, cfg, None, "clamp", rec, g_noise)
            u = u_hat.value
            if out_gamma is not None:
                out_gamma[:, h] = gamma.value
                out_eps[:, h] = eps
                bad = np.asarray(rec.get("status", np.full(S * B, OPTIMAL))) != OPTIMAL
                failed |= bad
        elif controls_fn is not None:
            u = controls_fn(scenes)
        else:
            raise InvalidInputError(f"unknown rollout mode {mode!r}")
        u = np.where((avt & ~failed[:, None])[..., None], u, 0.0)
        new_pos, new_vel = step_arrays(pos, vel, u, dt)
        hold = failed[:, None, None]
        pos = np.where(hold, pos, new_pos)
        vel = np.where(hold, vel, new_vel)
        out_pos[:, h] = pos
        tokens = np.roll(tokens, -1, axis=1)
        valid = np.roll(valid, -1, axis=1)
        tokens[:, -1] = 0.0
        tokens[:, -1, :, F_PX : F_PX + 2] = pos
        tokens[:, -1, :, F_VX : F_VX + 2] = vel
        tokens[:, -1, :, F_HEADING] = heading
        tokens[:, -1] *= avt[..., None]
        valid[:, -1] = avt
    shape = (S, B)
    return RolloutResult(
        out_pos.reshape(shape + out_pos.shape[1:]),
        None if out_gamma is None else out_gamma.reshape(shape + out_gamma.shape[1:]),
        out_eps.reshape(shape + (horizon_steps,)),
        failed.reshape(shape),
        dt,
    )


def _step_noise(model, streams, B, N):
    """Latent (and raw-responsibility) noise for one step, stacked sample-major."""
    if model.latent == "discrete":
        z = np.concatenate([r.uniform(size=(B, N)) for r in streams])
        g = np.concatenate([r.standard_normal((B, N)) for r in streams])
        return z, g
    z = np.concatenate([r.standard_normal((B, N, model.z_dim)) for r in streams])
    return z, None


def _errors(pred, gt, valid):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    err = np.linalg.norm(pred - gt, axis=-1)
    if valid is None:
        valid = np.ones(err.shape, dtype=bool)
    valid = np.broadcast_to(np.asarray(valid, bool), err.shape)
    return err, valid


def ade(pred, gt, valid=None):
    """Mean Euclidean displacement over all valid (sample, agent, step) entries."""
    err, valid = _errors(pred, gt, valid)
    if not valid.any():
        raise InvalidInputError("no valid entries")
    return float(err[valid].mean())


def miss_rate(pred, gt, threshold=1.0, valid=None, time_axis=-1):
    """Fraction of trajectories whose largest valid error exceeds ``threshold``.

    Errors are reduced over ``time_axis`` of the error array (positions
    without their last coordinate axis); trajectories with no valid step
    are ignored.
    """
    err, valid = _errors(pred, gt, valid)
    worst = np.where(valid, err, -np.inf).max(axis=time_axis)
    has = valid.any(axis=time_axis)
    if not has.any():
        raise InvalidInputError("no valid trajectories")
    return float((worst[has] > threshold).mean())


def rollout_metrics(result: RolloutResult, future_pos, future_valid, threshold=1.0, best_of_k=False):
    """ADE and miss rate of a rollout against ``(B, H, N, 2)`` futures.

    By default both average over samples. With ``best_of_k`` each scene
    keeps its lowest-ADE sample and each trajectory its smallest maximum
    error.
    """
    H = result.positions.shape[2]
    gt = np.asarray(future_pos)[:, :H]
    fv = np.asarray(future_valid)[:, :H]
    if not best_of_k:
        valid = np.broadcast_to(fv, result.positions.shape[:-1])
        return {
            "ade": ade(result.positions, gt, valid),
            "miss_rate": miss_rate(result.positions, gt, threshold, valid, time_axis=2),
        }
    err, valid = _errors(result.positions, gt, fv)  # (S, B, H, N)
    w = valid.astype(float)
    per_scene = (err * w).sum((2, 3)) / np.maximum(w.sum((2, 3)), 1)  # (S, B)
    has_scene = valid[0].any((1, 2))
    if not has_scene.any():
        raise InvalidInputError("no valid entries")
    worst = np.where(valid, err, -np.inf).max(axis=2).min(axis=0)  # (B, N)
    has = valid[0].any(axis=1)
    return {
        "ade": float(per_scene.min(0)[has_scene].mean()),
        "miss_rate": float((worst[has] > threshold).mean()),
    }


# -- densities and cross-sections -----------------------------------------------------
@dataclass
class DensityGrid:
    axis: np.ndarray  # conditioning values, one per column
    edges: np.ndarray  # bin edges of the responsibility axis
    mass: np.ndarray  # (columns, bins), each row sums to 1

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def to_json(self):
        return {"axis": self.axis.tolist(), "edges": self.edges.tolist(), "mass": self.mass.tolist()}


def histogram_grid(samples, axis, bins=50, value_range=(0.0, 1.0)):
    """Column-normalised histograms of ``samples (n, columns)``; values
    outside the range fall into the edge bins."""
    samples = np.asarray(samples, dtype=float)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    clipped = np.clip(samples, edges[0], edges[-1])
    idx = np.clip(np.searchsorted(edges, clipped, side="right") - 1, 0, bins - 1)
    mass = np.zeros((samples.shape[1], bins))
    for c in range(samples.shape[1]):
        mass[c] = np.bincount(idx[:, c], minlength=bins)
    mass /= np.maximum(mass.sum(1, keepdims=True), 1)
    return DensityGrid(np.asarray(axis, float), edges, mass)


def gamma_density_grid(P, model, scenes, axis_values, agent, bins, n_samples, cfg: FilterConfig, rng,
                       value_range=(0.0, 1.0)) -> DensityGrid:
    """Histogram of sampled responsibilities of one agent for each scene of
    a sweep (one scene per conditioning value)."""
    g = cvae.sample_gamma(P, model, scenes, n_samples, cfg, rng)[:, :, agent]
    return histogram_grid(g, axis_values, bins, value_range)


@dataclass
class CrossSection:
    axis: np.ndarray  # (K,)
    true: np.ndarray  # (K,)
    model: np.ndarray | None  # (n_samples, K)

    def to_json(self):
        return {
            "axis": self.axis.tolist(),
            "true": self.true.tolist(),
            "model": None if self.model is None else self.model.tolist(),
        }


def x_gap(dataset):
    return dataset.pos[:, 1, 0] - dataset.pos[:, 0, 0]


def control_cross_section(dataset, agent=0, dim=0, axis_fn=x_gap, P=None, model=None, cfg=None, rng=None,
                          n_samples=1) -> CrossSection:
    """Ground-truth control component against an axis variable, paired
    with model samples when a model is given."""
    if len(dataset) == 0:
        return CrossSection(np.zeros(0), np.zeros(0), None if model is None else np.zeros((n_samples, 0)))
    axis = np.asarray(axis_fn(dataset), dtype=float)
    true = np.asarray(dataset.u[:, agent, dim], dtype=float)
    samples = None
    if model is not None:
        u, _, _ = cvae.sample_controls(P, model, dataset, n_samples, cfg, rng)
        samples = u[:, :, agent, dim]
    return CrossSection(axis, true, samples)


def wasserstein1(a, b):
    return float(wasserstein_distance(np.ravel(a), np.ravel(b)))


# -- baseline comparison ----------------------------------------------------------------
def compare_baselines(test_set, models, seeds, horizon=10, dt=0.1, n_samples=8, policy=PolicyConfig(),
                      threshold=1.0, max_scenes=None, best_of_k=False, futures=None):
    """Metric table over seeds.

    ``models`` maps a row name to ``(params, model_config, filter_config)``.
    A ``u_desired`` row (pure policy rollout) is always added first.
    ``futures`` is ``(future_pos, future_valid)``; by default the recorded
    futures in ``test_set.truth`` are used. Returns a list of rows
    ``{name, ade_mean, ade_std, miss_mean, miss_std, n_seeds}``.
    """
    if futures is None:
        futures = (test_set.truth["future_pos"], test_set.truth["future_valid"] & test_set.agent_valid[:, None, :])
    fut, fval = futures
    scenes = test_set if max_scenes is None else test_set.take(np.arange(min(max_scenes, len(test_set))))
    fut, fval = fut[: len(scenes)], fval[: len(scenes)]
    rows = []
    for name, spec in {"u_desired": None, **models}.items():
        ades, misses = [], []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            if spec is None:
                res = rollout(None, None, scenes, horizon, dt, 1, None, rng, policy, mode="desired")
            else:
                P, model, fcfg = spec
                res = rollout(P, model, scenes, horizon, dt, n_samples, fcfg, rng, policy)
            m = rollout_metrics(res, fut, fval, threshold, best_of_k)
            ades.append(m["ade"])
            misses.append(m["miss_rate"])
        rows.append(
            {
                "name": name,
                "ade_mean": float(np.mean(ades)),
                "ade_std": float(np.std(ades)),
                "miss_mean": float(np.mean(misses)),
                "miss_std": float(np.std(misses)),
                "n_seeds": len(seeds),
            }
        )
    return rows


def write_table_csv(path, rows):
    fields = ["name", "ade_mean", "ade_std", "miss_mean", "miss_std", "n_seeds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
