"""Conditional VAE over per-agent responsibilities.

A prior network ``p(z | s)`` and a posterior network ``q(z | s, u)``
produce per-agent latents; the decoder maps ``(z, s)`` to raw
responsibilities which pass through an output activation and the safety
filter. The reconstruction term is a Gaussian likelihood of the observed
controls around the filtered controls, so gradients reach the decoder
through the QP solution.

Two context encoders are supported: ``"mlp"`` flattens the current scene
into one vector (good for the two-agent corridor) and ``"sequence"`` runs
the masked attention encoder over the agent-time history. The latent is
either Gaussian or categorical (relaxed with Gumbel-softmax during
training). With ``output="u"`` the decoder emits controls directly and the
filter is skipped (the direct-prediction baseline).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvexityError, InvalidInputError
from .nn import autodiff as ad
from .nn.layers import AttentionSpec, MLPSpec, attention_block, gaussian_head, init_attention, init_mlp, mlp_forward
from .nn.params import ParamStore
from .safety_filter import ACTIVATIONS, FilterConfig, project_batch, project_vjp_batch
from .sequence import EncoderConfig, encode_context, init_encoder

LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class ReconConfig:
    sigma: float = 0.25
    learn_sigma: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("recon sigma must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"  # "mlp" | "sequence"
    n_agents: int = 2
    d_z: int = 2
    hidden: tuple = (16, 16, 16)
    activation: str = "tanh"
    latent: str = "gaussian"  # "gaussian" | "discrete"
    n_categories: int = 4
    output: str = "gamma"  # "gamma" | "u"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pos_scale: float = 10.0
    vel_scale: float = 5.0
    acc_scale: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.kind not in ("mlp", "sequence"):
            raise InvalidInputError(f"unknown model kind {self.kind!r}")
        if self.latent not in ("gaussian", "discrete"):
            raise InvalidInputError(f"unknown latent {self.latent!r}")
        if self.output not in ("gamma", "u"):
            raise InvalidInputError(f"unknown output {self.output!r}")
        if self.output == "u" and self.latent != "gaussian":
            raise InvalidInputError("direct control output requires a Gaussian latent")
        if min(self.n_agents, self.d_z, self.n_categories) < 1:
            raise InvalidInputError("n_agents, d_z and n_categories must be >= 1")

    @property
    def z_dim(self):
        return self.n_categories if self.latent == "discrete" else self.d_z

    @property
    def stat_dim(self):
        """Width of one agent's latent distribution parameters."""
        return self.n_categories if self.latent == "discrete" else 2 * self.d_z

    @property
    def out_dim(self):
        if self.output == "u":
            return 2
        return 2 if self.latent == "discrete" else 1

    @property
    def scene_dim(self):
        return 6 * self.n_agents

    @property
    def agent_ctx_dim(self):
        if self.kind == "mlp":
            return self.scene_dim + self.n_agents
        return self.encoder.d_model + 2

    @property
    def per_agent_decoder(self):
        # categorical mixtures are read per agent, so the decoder must not
        # mix latents across agents
        return self.latent == "discrete"

    # -- network shapes -------------------------------------------------------
    def spec(self, head):
        N, H, act = self.n_agents, self.hidden, self.activation
        if self.kind == "mlp":
            if head == "prior":
                return MLPSpec(self.scene_dim, H, N * self.stat_dim, act)
            if head == "posterior":
                return MLPSpec(self.scene_dim + 2 * N, H, N * self.stat_dim, act)
            if head == "decoder":
                if self.per_agent_decoder:
                    return MLPSpec(self.z_dim + self.agent_ctx_dim, H, self.out_dim, act)
                return MLPSpec(N * self.z_dim + self.scene_dim, H, N * self.out_dim, act)
        else:
            d = self.encoder.d_model
            if head == "prior":
                return MLPSpec(self.agent_ctx_dim, H, self.stat_dim, act)
            if head == "posterior":
                return MLPSpec(self.agent_ctx_dim + 2, H, self.stat_dim, act)
            if head == "decoder":
                if self.per_agent_decoder:
                    return MLPSpec(self.z_dim + self.agent_ctx_dim, H, self.out_dim, act)
                return MLPSpec(d, H, self.out_dim, act)
            if head == "dec_embed":
                return MLPSpec(self.z_dim + self.agent_ctx_dim, (), d, act)
        raise KeyError(head)

    @property
    def mix_attention(self):
        e = self.encoder
        return AttentionSpec(e.d_model, e.n_heads, e.ff_hidden, e.activation, e.layer_norm)


def init_params(model: ModelConfig, rng, recon: ReconConfig | None = None) -> ParamStore:
    store = ParamStore()
    if model.kind == "sequence":
        if model.encoder.t_max < 1:
            raise InvalidInputError("encoder t_max must be >= 1")
        init_encoder(store, model.encoder, rng)
    for head in ("prior", "posterior", "decoder"):
        init_mlp(store, head, model.spec(head), rng)
    if model.kind == "sequence" and not model.per_agent_decoder:
        init_mlp(store, "dec_embed", model.spec("dec_embed"), rng)
        init_attention(store, "dec_mix", model.mix_attention, rng)
    if recon is not None and recon.learn_sigma:
        store.add("recon.log_sigma", np.array(np.log(recon.sigma)))
    return store


# -- latent distributions -----------------------------------------------------------
@dataclass
class LatentGaussian:
    mean: object  # (B, N, d_z)
    log_var: object


@dataclass
class LatentCategorical:
    logits: object  # (B, N, K), log-normalised


@dataclass
class Context:
    scene: object  # (B, scene_dim) for the MLP model, else None
    agent: object  # (B, N, agent_ctx_dim)
    agent_valid: np.ndarray  # (B, N)


def _scaled_agent_features(batch, model):
    av = np.asarray(batch.agent_valid, bool)
    origin = batch.pos[:, :1]
    feat = np.concatenate(
        [
            (batch.pos - origin) / model.pos_scale,
            batch.vel / model.vel_scale,
            batch.u_des / model.acc_scale,
        ],
        axis=-1,
    )
    return np.where(av[..., None], feat, 0.0)


def context(P, model: ModelConfig, batch) -> Context:
    """Conditioning features for every agent slot of a batch."""
    av = np.asarray(batch.agent_valid, bool)
    B, N = av.shape
    if N != model.n_agents:
        raise InvalidInputError(f"batch has {N} agent slots, model expects {model.n_agents}")
    if model.kind == "mlp":
        scene = _scaled_agent_features(batch, model).reshape(B, -1)
        slot = np.broadcast_to(np.eye(N), (B, N, N))
        agent = np.concatenate([np.broadcast_to(scene[:, None], (B, N, scene.shape[1])), slot], -1)
        return Context(ad.const(scene), ad.const(agent * av[..., None]), av)
    feat = encode_context(P, model.encoder, batch.tokens, batch.valid)
    ud = np.where(av[..., None], batch.u_des / model.acc_scale, 0.0)
    agent = ad.concat([feat, ud], axis=-1) * av[..., None]
    return Context(None, agent, av)


def _latent_from_stats(stats, model, av):
    if model.latent == "discrete":
        return LatentCategorical(ad.log_softmax(stats, axis=-1))
    mean, log_var = gaussian_head(stats)
    return LatentGaussian(mean * av[..., None], log_var * av[..., None])


def prior(P, model: ModelConfig, ctx: Context):
    av = ctx.agent_valid
    B, N = av.shape
    if model.kind == "mlp":
        stats = ad.reshape(mlp_forward(P, "prior", model.spec("prior"), ctx.scene), (B, N, model.stat_dim))
    else:
        stats = mlp_forward(P, "prior", model.spec("prior"), ctx.agent)
    return _latent_from_stats(stats, model, av)


def posterior(P, model: ModelConfig, ctx: Context, u):
    av = ctx.agent_valid
    B, N = av.shape
    u = np.asarray(u, dtype=float)
    if u.shape != (B, N, 2):
        raise InvalidInputError(f"controls have shape {u.shape}, expected {(B, N, 2)}")
    if not np.all(np.isfinite(u[av])):
        bad = np.argwhere(av & ~np.isfinite(u).all(-1))[0]
        raise InvalidInputError(f"scene {bad[0]}: missing control for valid agent {bad[1]}")
    us = np.where(av[..., None], u / model.acc_scale, 0.0)
    if model.kind == "mlp":
        x = ad.concat([ctx.scene, us.reshape(B, -1)], axis=-1)
        stats = ad.reshape(mlp_forward(P, "posterior", model.spec("posterior"), x), (B, N, model.stat_dim))
    else:
        stats = mlp_forward(P, "posterior", model.spec("posterior"), ad.concat([ctx.agent, us], axis=-1))
    return _latent_from_stats(stats, model, av)


def reparam_sample(g: LatentGaussian, noise):
    """``z = mean + exp(log_var / 2) * noise``."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != ad.value_of(g.mean).shape:
        raise InvalidInputError("noise shape does not match the latent")
    return g.mean + ad.exp(g.log_var * 0.5) * noise


def kl_gaussian(q: LatentGaussian, p: LatentGaussian, agent_valid=None):
    """Closed-form ``KL(q || p)`` for diagonal Gaussians, summed over
    latent dimensions and valid agents; one value per scene."""
    lq, lp = q.log_var, p.log_var
    diff = q.mean - p.mean
    term = ad.exp(lq - lp) + diff * diff / ad.exp(lp) - 1.0 + lp - lq
    per_agent = ad.vsum(term, axis=-1) * 0.5
    if agent_valid is not None:
        per_agent = per_agent * np.asarray(agent_valid, float)
    return ad.vsum(per_agent, axis=-1)


def kl_categorical(q: LatentCategorical, p: LatentCategorical, agent_valid=None):
    probs = ad.exp(q.logits)
    per_agent = ad.vsum(probs * (q.logits - p.logits), axis=-1)
    if agent_valid is not None:
        per_agent = per_agent * np.asarray(agent_valid, float)
    return ad.vsum(per_agent, axis=-1)


def gumbel_softmax_sample(logits, temperature, rng=None, gumbel=None):
    """Relaxed one-hot draw ``softmax((logits + g) / temperature)``."""
    if not temperature > 0:
        raise InvalidInputError("temperature must be > 0")
    shape = ad.value_of(logits).shape
    if gumbel is None:
        gumbel = -np.log(-np.log(rng.uniform(np.finfo(float).tiny, 1.0, size=shape)))
    return ad.softmax((logits + gumbel) * (1.0 / temperature), axis=-1)


def decode(P, model: ModelConfig, z, ctx: Context):
    """Raw decoder output ``(B, N, out_dim)``."""
    av = ctx.agent_valid
    B, N = av.shape
    if model.per_agent_decoder:
        x = ad.concat([z, ctx.agent], axis=-1)
        out = mlp_forward(P, "decoder", model.spec("decoder"), x)
    elif model.kind == "mlp":
        x = ad.concat([ad.reshape(z, (B, N * model.z_dim)), ctx.scene], axis=-1)
        out = ad.reshape(mlp_forward(P, "decoder", model.spec("decoder"), x), (B, N, model.out_dim))
    else:
        h = mlp_forward(P, "dec_embed", model.spec("dec_embed"), ad.concat([z, ctx.agent], axis=-1))
        mask = av[:, :, None] & av[:, None, :]
        h = attention_block(P, "dec_mix", model.mix_attention, h, mask)
        out = mlp_forward(P, "decoder", model.spec("decoder"), h)
    return out * av[..., None]


def decode_gamma(P, model: ModelConfig, z, ctx: Context):
    """Raw (pre-activation) responsibilities ``(B, N)``; for a categorical
    latent this is the component mean."""
    if model.output != "gamma":
        raise InvalidInputError("model decodes controls, not responsibilities")
    return decode(P, model, z, ctx)[..., 0]


def activate(raw, cfg: FilterConfig, agent_valid, guard="raise", scene_ids=None):
    """Differentiable counterpart of :func:`safety_filter.apply_activation`.

    Returns ``(gamma, clamped)``; ``clamped`` is a ``(B, N)`` flag array.
    """
    mode = cfg.activation
    av = np.asarray(agent_valid, bool)
    floor = -cfg.beta1 + cfg.conv_floor
    if mode == "none":
        g = raw
    elif mode == "softmax":
        g = ad.softmax(raw, axis=-1, mask=av)
    elif mode == "clip_zero":
        g = ad.clip(raw, 0.0, None)
    elif mode == "clip_neg_beta":
        g = ad.clip(raw, floor, None)
    elif mode == "tanh":
        g = ad.tanh(raw)
    else:
        raise InvalidInputError(f"unknown activation {mode!r}; expected one of {ACTIVATIONS}")
    low = (ad.value_of(g) < floor) & av
    if low.any():
        if guard == "raise":
            b, n = np.argwhere(low)[0]
            scene = int(b) if scene_ids is None else int(np.asarray(scene_ids)[b])
            raise ConvexityError(
                f"scene {scene}, agent {n}: gamma + beta1 below the convexity floor", agent=int(n), scene=scene
            )
        g = ad.where(low, floor, g)
    return g, low


def filter_op(gamma, batch, cfg: FilterConfig, record=None):
    """Safety filter as a tape node: ``gamma (B, N) -> u (B, N, 2)``."""
    fb = project_batch(batch.u_des, batch.pos, batch.vel, ad.value_of(gamma), cfg, batch.agent_valid)
    if record is not None:
        record["status"] = np.asarray(fb.status)

    def vjp(g):
        dg, _, deg = project_vjp_batch(fb, g)
        if record is not None:
            record["degenerate"] = int(np.sum(deg))
        return (dg,)

    return ad.custom(fb.u, [gamma], vjp), fb


def _recon_sigma(P, recon: ReconConfig):
    if recon.learn_sigma and "recon.log_sigma" in P:
        return ad.exp(P["recon.log_sigma"])
    return ad.const(np.array(recon.sigma))


def gaussian_nll(u, u_hat, sigma, agent_valid):
    """Per-scene negative log-likelihood of ``u`` under ``N(u_hat, sigma^2 I)``."""
    av = np.asarray(agent_valid, float)
    d = (u_hat - np.where(av[..., None] > 0, u, 0.0)) * av[..., None]
    sq = ad.vsum(ad.vsum(d * d, axis=-1), axis=-1)
    n_terms = 2.0 * av.sum(-1)
    var = sigma * sigma
    return sq * 0.5 / var + (ad.log(var) + LOG_2PI) * (0.5 * n_terms)


def _draw_latent(model, dist, rng, temperature, noise=None):
    if model.latent == "discrete":
        return gumbel_softmax_sample(dist.logits, temperature, rng, gumbel=noise)
    if noise is None:
        noise = rng.standard_normal(ad.value_of(dist.mean).shape)
    return reparam_sample(dist, noise)


def predict_controls(P, model, batch, z, ctx, cfg: FilterConfig, rng=None, guard="raise", record=None, gamma_noise=None):
    """Decode latents into controls; returns ``(u_hat, gamma, eps)``."""
    out = decode(P, model, z, ctx)
    if model.output == "u":
        return out * model.acc_scale, None, np.zeros(len(ctx.agent_valid))
    raw = out[..., 0]
    if model.latent == "discrete":
        if gamma_noise is None:
            gamma_noise = rng.standard_normal(raw.shape)
        raw = raw + ad.exp(ad.clip(out[..., 1], -10.0, 10.0) * 0.5) * gamma_noise
    scene_ids = getattr(batch, "scene_ids", None)
    gamma, low = activate(raw, cfg, ctx.agent_valid, guard, scene_ids)
    if record is not None:
        record["clamped"] = int(low.sum())
        record["clamped_scenes"] = np.flatnonzero(low.any(-1)).tolist()
    u_hat, fb = filter_op(gamma, batch, cfg, record)
    return u_hat, gamma, fb.epsilon


def elbo_loss(P, model: ModelConfig, batch, recon: ReconConfig, beta_kl, cfg: FilterConfig, rng,
              temperature=1.0, guard="raise", noise=None):
    """Negative ELBO averaged over the batch, plus diagnostics.

    One posterior sample per scene. ``noise`` may fix the latent noise
    (and, for a categorical latent, the Gumbel noise) for reproducible
    gradient checks.
    """
    if len(batch.agent_valid) == 0:
        raise InvalidInputError("empty batch")
    ctx = context(P, model, batch)
    q = posterior(P, model, ctx, batch.u)
    p = prior(P, model, ctx)
    av = ctx.agent_valid
    if model.latent == "discrete":
        kl = kl_categorical(q, p, av)
    else:
        kl = kl_gaussian(q, p, av)
    lat_noise, g_noise = (None, None) if noise is None else noise
    z = _draw_latent(model, q, rng, temperature, lat_noise)
    record = {}
    u_hat, gamma, eps = predict_controls(P, model, batch, z, ctx, cfg, rng, guard, record, g_noise)
    nll = gaussian_nll(batch.u, u_hat, _recon_sigma(P, recon), av)
    loss = ad.mean(kl * float(beta_kl) + nll)
    diag = {
        "loss": float(loss.value),
        "kl": float(np.mean(kl.value)),
        "nll": float(np.mean(nll.value)),
        "eps_mean": float(np.mean(eps)),
        "eps_max": float(np.max(eps)) if len(eps) else 0.0,
        "record": record,
    }
    return loss, diag


# -- sampling -----------------------------------------------------------------
def tile_batch(batch, n):
    """Repeat every scene ``n`` times (sample-major)."""

    class _Tiled:
        pass

    out = _Tiled()
    for name in ("tokens", "valid", "pos", "vel", "agent_valid", "u_des"):
        arr = np.asarray(getattr(batch, name))
        setattr(out, name, np.concatenate([arr] * n, axis=0) if n else arr[:0])
    return out


def _prior_latent(P, model, ctx, rng, noise=None):
    p = prior(P, model, ctx)
    if model.latent == "discrete":
        probs = np.exp(p.logits.value)
        if noise is None:
            u = rng.uniform(size=probs.shape[:-1] + (1,))
        else:
            u = np.asarray(noise)[..., None]
        k = (u > np.cumsum(probs, axis=-1)).sum(-1).clip(max=model.n_categories - 1)
        return np.eye(model.n_categories)[k]
    if noise is None:
        noise = rng.standard_normal(p.mean.value.shape)
    return (p.mean + ad.exp(p.log_var * 0.5) * noise).value


def sample_gamma(P, model: ModelConfig, batch, n_samples, cfg: FilterConfig, rng, noise=None):
    """Draw activated responsibilities from the prior pushforward.

    Returns ``(n_samples, B, N)``. ``noise`` optionally fixes the latent
    noise with shape ``(n_samples, B, N, d_z)``.
    """
    B, N = np.asarray(batch.agent_valid).shape
    if n_samples == 0:
        return np.zeros((0, B, N))
    tb = tile_batch(batch, n_samples)
    ctx = context(P, model, tb)
    z = _prior_latent(P, model, ctx, rng, None if noise is None else np.asarray(noise).reshape(n_samples * B, N, -1))
    out = decode(P, model, ad.const(z), ctx).value
    raw = out[..., 0]
    if model.latent == "discrete":
        raw = raw + np.exp(np.clip(out[..., 1], -10, 10) / 2) * rng.standard_normal(raw.shape)
    gamma, _ = activate(ad.const(raw), cfg, ctx.agent_valid, guard="clamp")
    return gamma.value.reshape(n_samples, B, N)


def sample_controls(P, model: ModelConfig, batch, n_samples, cfg: FilterConfig, rng, posterior_u=None):
    """Sample controls; from the prior, or from the posterior given
    ``posterior_u``. Returns ``(u, gamma, eps)`` with a leading sample axis."""
    B, N = np.asarray(batch.agent_valid).shape
    tb = tile_batch(batch, n_samples)
    ctx = context(P, model, tb)
    if posterior_u is None:
        z = ad.const(_prior_latent(P, model, ctx, rng))
    else:
        q = posterior(P, model, ctx, np.concatenate([posterior_u] * n_samples, axis=0))
        if model.latent == "discrete":
            probs = np.exp(q.logits.value)
            u01 = rng.uniform(size=probs.shape[:-1] + (1,))
            k = (u01 > np.cumsum(probs, -1)).sum(-1).clip(max=model.n_categories - 1)
            z = ad.const(np.eye(model.n_categories)[k])
        else:
            z = ad.const(reparam_sample(q, rng.standard_normal(q.mean.value.shape)).value)
    u_hat, gamma, eps = predict_controls(P, model, tb, z, ctx, cfg, rng, guard="clamp")
    u = u_hat.value.reshape(n_samples, B, N, 2)
    g = None if gamma is None else gamma.value.reshape(n_samples, B, N)
    return u, g, np.asarray(eps).reshape(n_samples, B)


def gamma_gmm(P, model: ModelConfig, ctx: Context):
    """Per-agent Gaussian mixture over raw responsibilities.

    Returns ``(weights, means, variances)``, each ``(B, N, K)``. Component
    ``k`` is the decoder output for latent category ``k``; weights are the
    prior category probabilities.
    """
    if model.latent != "discrete":
        raise InvalidInputError("gamma_gmm needs a categorical latent")
    B, N = ctx.agent_valid.shape
    K = model.n_categories
    weights = np.exp(prior(P, model, ctx).logits.value)
    means = np.zeros((B, N, K))
    vars_ = np.zeros((B, N, K))
    for k in range(K):
        z = np.zeros((B, N, K))
        z[..., k] = 1.0
        out = decode(P, model, ad.const(z), ctx).value
        means[..., k] = out[..., 0]
        vars_[..., k] = np.exp(np.clip(out[..., 1], -10, 10))
    return weights, means, vars_
