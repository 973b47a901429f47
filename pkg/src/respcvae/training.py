"""Optimisation: Adam, KL annealing, minibatch loops and checkpoints."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cvae
from .cvae import ModelConfig, ReconConfig
from .errors import ConvexityError, InvalidInputError
from .nn import autodiff as ad
from .nn.params import ParamStore, load_checkpoint, save_checkpoint
from .safety_filter import FilterConfig
from .sequence import EncoderConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    beta_start_epoch: float = 0.0
    beta_end_epoch: float | None = None  # default: 30% of the epochs
    max_beta: float = 1.0
    seed: int = 0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    temperature_start: float = 1.0
    temperature_end: float = 0.5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")
        if not (0 <= self.b1 < 1 and 0 <= self.b2 < 1):
            raise InvalidInputError("Adam decay rates must lie in [0, 1)")

    @property
    def beta_end(self):
        return 0.3 * self.epochs if self.beta_end_epoch is None else self.beta_end_epoch


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update.

    Returns ``(params, state, skipped)``; a non-finite gradient leaves
    everything untouched and sets ``skipped``.
    """
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise InvalidInputError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grads)):
        log.warning("adam: non-finite gradient, step skipped")
        return params, state, True
    t = state.step + 1
    m = cfg.b1 * state.m + (1 - cfg.b1) * grads
    v = cfg.b2 * state.v + (1 - cfg.b2) * grads * grads
    m_hat = m / (1 - cfg.b1**t)
    v_hat = v / (1 - cfg.b2**t)
    new = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, AdamState(m, v, t), False


def beta_schedule(epoch, cfg: TrainConfig):
    """0 before the start epoch, linear ramp, ``max_beta`` from the end epoch."""
    start, end = cfg.beta_start_epoch, cfg.beta_end
    if epoch < start:
        return 0.0
    if epoch >= end or end <= start:
        return float(cfg.max_beta)
    return float(cfg.max_beta * (epoch - start) / (end - start))


def temperature_schedule(epoch, cfg: TrainConfig):
    """Geometric interpolation of the Gumbel-softmax temperature."""
    frac = 0.0 if cfg.epochs <= 1 else min(1.0, epoch / (cfg.epochs - 1))
    return float(cfg.temperature_start * (cfg.temperature_end / cfg.temperature_start) ** frac)


def clip_global_norm(g, max_norm):
    norm = float(np.linalg.norm(g))
    if max_norm and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


@dataclass
class TrainResult:
    store: ParamStore
    history: list
    opt: AdamState
    model: ModelConfig
    rng_state: dict = field(default_factory=dict)
    kind: str = "cvae"


def _batch(dataset, idx):
    b = dataset.take(idx)
    b.scene_ids = idx
    return b


def _run_epochs(dataset, store, opt, rng, train_cfg, start_epoch, history, loss_fn, checkpoint, kind):
    K = len(dataset)
    if K == 0:
        raise InvalidInputError("empty dataset")
    for epoch in range(start_epoch, train_cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(K)
        sums = {"loss": 0.0, "kl": 0.0, "nll": 0.0, "eps_mean": 0.0}
        n_seen = skipped = clamped = failed = 0
        for s in range(0, K, train_cfg.batch_size):
            idx = perm[s : s + train_cfg.batch_size]
            batch = _batch(dataset, idx)
            leaves = store.leaves()
            try:
                loss, diag = loss_fn(leaves, batch, epoch, rng)
            except ConvexityError as err:
                log.warning("epoch %d: batch skipped: %s", epoch, err)
                failed += 1
                continue
            loss.backward()
            g, _ = clip_global_norm(store.gather_grad(leaves), train_cfg.grad_clip)
            store.flat, opt, skip = adam_step(store.flat, g, opt, train_cfg)
            skipped += skip
            rec = diag.get("record", {})
            if rec.get("clamped"):
                clamped += rec["clamped"]
                log.debug("epoch %d: clamped gamma in scenes %s", epoch, [int(idx[i]) for i in rec["clamped_scenes"]])
            for key in sums:
                sums[key] += diag.get(key, 0.0) * len(idx)
            n_seen += len(idx)
        entry = {k: v / max(n_seen, 1) for k, v in sums.items()}
        entry.update(
            epoch=epoch,
            beta=beta_schedule(epoch, train_cfg),
            skipped_steps=skipped,
            failed_batches=failed,
            clamped=clamped,
            wall_time=time.perf_counter() - t0,
        )
        history.append(entry)
        log.info("epoch %d loss %.4f kl %.4f nll %.4f", epoch, entry["loss"], entry["kl"], entry["nll"])
        if checkpoint and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            checkpoint(epoch)
    return store, opt


def train(dataset, model: ModelConfig, train_cfg: TrainConfig, filter_cfg: FilterConfig, recon_cfg: ReconConfig,
          rng=None, store=None, checkpoint_path=None, resume: TrainResult | None = None) -> TrainResult:
    """Fit the CVAE by minimising the negative ELBO with annealed KL weight."""
    return _train(dataset, model, train_cfg, filter_cfg, recon_cfg, rng, store, checkpoint_path, resume, "cvae")


def train_deterministic(dataset, model: ModelConfig, train_cfg: TrainConfig, filter_cfg: FilterConfig,
                        rng=None, store=None, checkpoint_path=None, resume=None) -> TrainResult:
    """Fit a deterministic responsibility network by least squares on the
    filtered controls. The decoder is fed a zero latent, so prior and
    posterior heads stay unused."""
    return _train(dataset, model, train_cfg, filter_cfg, ReconConfig(), rng, store, checkpoint_path, resume,
                  "deterministic")


def deterministic_loss(P, model, batch, filter_cfg, guard="clamp"):
    ctx = cvae.context(P, model, batch)
    B, N = ctx.agent_valid.shape
    z = ad.const(np.zeros((B, N, model.z_dim)))
    u_hat, _, eps = cvae.predict_controls(P, model, batch, z, ctx, filter_cfg, None, guard, {}, np.zeros((B, N)))
    av = ctx.agent_valid[..., None]
    d = (u_hat - np.where(av, batch.u, 0.0)) * av
    per_scene = ad.vsum(ad.vsum(d * d, axis=-1), axis=-1)
    loss = ad.mean(per_scene)
    return loss, {"loss": float(loss.value), "nll": float(loss.value), "kl": 0.0, "eps_mean": float(np.mean(eps))}


def _train(dataset, model, train_cfg, filter_cfg, recon_cfg, rng, store, checkpoint_path, resume, kind):
    rng = np.random.default_rng(train_cfg.seed) if rng is None else rng
    if resume is not None:
        store, opt, history = resume.store.copy(), resume.opt, list(resume.history)
        if resume.rng_state:
            rng.bit_generator.state = resume.rng_state
        start = len(history)
    else:
        if store is None:
            store = cvae.init_params(model, rng, recon_cfg)
        opt, history, start = AdamState.zeros(len(store)), [], 0

    if kind == "cvae":
        def loss_fn(P, batch, epoch, r):
            return cvae.elbo_loss(P, model, batch, recon_cfg, beta_schedule(epoch, train_cfg), filter_cfg, r,
                                  temperature=temperature_schedule(epoch, train_cfg), guard="clamp")
    else:
        def loss_fn(P, batch, epoch, r):
            return deterministic_loss(P, model, batch, filter_cfg)

    def checkpoint(epoch):
        res = TrainResult(store, history, opt, model, rng.bit_generator.state, kind)
        save_training_checkpoint(checkpoint_path, res, train_cfg, recon_cfg)

    store, opt = _run_epochs(dataset, store, opt, rng, train_cfg, start, history, loss_fn,
                             checkpoint if checkpoint_path else None, kind)
    result = TrainResult(store, history, opt, model, rng.bit_generator.state, kind)
    if checkpoint_path:
        save_training_checkpoint(checkpoint_path, result, train_cfg, recon_cfg)
    return result


# -- checkpoints --------------------------------------------------------------
def model_to_dict(model: ModelConfig):
    return asdict(model)


def model_from_dict(d):
    d = dict(d)
    if "encoder" in d and isinstance(d["encoder"], dict):
        d["encoder"] = EncoderConfig(**d["encoder"])
    d["hidden"] = tuple(d.get("hidden", ()))
    return ModelConfig(**d)


def save_training_checkpoint(path, result: TrainResult, train_cfg=None, recon_cfg=None):
    extra = {
        "kind": result.kind,
        "model": model_to_dict(result.model),
        "recon": asdict(recon_cfg) if recon_cfg is not None else None,
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "history": result.history,
        "adam_step": result.opt.step,
        "rng_state": _jsonable(result.rng_state),
    }
    save_checkpoint(path, result.store, extra, {"adam_m": result.opt.m, "adam_v": result.opt.v})


def load_training_checkpoint(path) -> TrainResult:
    store, extra, arrays = load_checkpoint(path)
    opt = AdamState(arrays.get("adam_m", np.zeros(len(store))), arrays.get("adam_v", np.zeros(len(store))),
                    int(extra.get("adam_step", 0)))
    rng_state = extra.get("rng_state") or {}
    return TrainResult(store, list(extra.get("history", [])), opt, model_from_dict(extra["model"]), rng_state,
                       extra.get("kind", "cvae"))


def _jsonable(o):
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.integer):
        return int(o)
    return o
