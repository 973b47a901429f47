"""MLPs, Gaussian heads, sinusoidal time codes and masked self-attention.

Forward functions take a mapping ``P`` from parameter name to either a
numpy array or an autodiff leaf, so the same code runs for inference and
for gradient evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0

_ACT = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "identity": lambda x: x,
}


def activation(name):
    try:
        return _ACT[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


@dataclass(frozen=True)
class MLPSpec:
    in_dim: int
    hidden: tuple
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.in_dim, self.out_dim) + self.hidden) < 1:
            raise ValueError("MLP widths must be >= 1")

    @property
    def widths(self):
        return (self.in_dim,) + self.hidden + (self.out_dim,)


def xavier(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_mlp(store, name, spec: MLPSpec, rng, zero_last=False):
    w = spec.widths
    for i in range(len(w) - 1):
        last = i == len(w) - 2
        W = np.zeros((w[i], w[i + 1])) if (last and zero_last) else xavier(rng, w[i], w[i + 1])
        store.add(f"{name}.{i}.W", W)
        store.add(f"{name}.{i}.b", np.zeros(w[i + 1]))


def mlp_forward(P, name, spec: MLPSpec, x):
    """Affine/activation chain; the last layer is affine only."""
    if ad.value_of(x).shape[-1] != spec.in_dim:
        raise ValueError(f"{name}: input width {ad.value_of(x).shape[-1]} != {spec.in_dim}")
    act = activation(spec.activation)
    n = len(spec.widths) - 1
    h = x
    for i in range(n):
        h = ad.matmul(h, P[f"{name}.{i}.W"]) + P[f"{name}.{i}.b"]
        if i < n - 1:
            h = act(h)
    return h


def gaussian_head(out):
    """Split the last axis of ``out`` into mean and clamped log-variance."""
    d = ad.value_of(out).shape[-1] // 2
    mean = out[..., :d]
    log_var = ad.clip(out[..., d:], LOG_VAR_MIN, LOG_VAR_MAX)
    return mean, log_var


def time_embed(t_index, d, t_max=None):
    """Sinusoidal code: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``."""
    t = np.asarray(t_index, dtype=float)
    if t_max is not None and (np.any(t < 0) or np.any(t >= t_max)):
        raise ValueError(f"time index outside [0, {t_max})")
    i = np.arange((d + 1) // 2)
    freq = 1.0 / (10000.0 ** (2 * i / d))
    ang = t[..., None] * freq
    out = np.empty(t.shape + (2 * len(i),))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out[..., :d]


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int
    n_heads: int
    hidden: int
    activation: str = "tanh"
    layer_norm: bool = False
    ordered: bool = False  # left-to-right key reductions, exact under padding

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def init_attention(store, name, spec: AttentionSpec, rng):
    d = spec.d_model
    for w in ("Wq", "Wk", "Wv", "Wo"):
        store.add(f"{name}.{w}", xavier(rng, d, d))
    store.add(f"{name}.bo", np.zeros(d))
    store.add(f"{name}.same", np.zeros(spec.n_heads))
    init_mlp(store, f"{name}.ff", MLPSpec(d, (spec.hidden,), d, spec.activation), rng)
    if spec.layer_norm:
        for ln in ("ln1", "ln2"):
            store.add(f"{name}.{ln}.g", np.ones(d))
            store.add(f"{name}.{ln}.b", np.zeros(d))


def _layer_norm(P, name, x, eps=1e-5):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.power(var + eps, 0.5) * P[f"{name}.g"] + P[f"{name}.b"]


def attention_block(P, name, spec: AttentionSpec, x, mask, same_group=None):
    """Masked multi-head self-attention with residual, then a residual MLP.

    ``x`` is ``(B, S, d)``; ``mask[b, i, j]`` says whether token ``i`` may
    attend to token ``j``. ``same_group`` (same shape, optional) marks
    token pairs belonging to the same agent; each head learns an additive
    logit bias for those pairs. Rows with no allowed key pass through
    unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    B, S, d = ad.value_of(x).shape
    H = spec.n_heads
    dh = d // H
    h_in = _layer_norm(P, f"{name}.ln1", x) if spec.layer_norm else x

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))

    q = heads(ad.matmul(h_in, P[f"{name}.Wq"]))
    k = heads(ad.matmul(h_in, P[f"{name}.Wk"]))
    v = heads(ad.matmul(h_in, P[f"{name}.Wv"]))
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    if same_group is not None:
        bias = ad.reshape(P[f"{name}.same"], (1, H, 1, 1)) * np.asarray(same_group, float)[:, None]
        logits = logits + bias
    attn = ad.softmax(logits, axis=-1, mask=mask[:, None, :, :], ordered=spec.ordered)
    if spec.ordered:
        # (B, H, S, S, 1) * (B, H, 1, S, dh) summed over keys in order
        ctx = ad.ordered_sum(ad.reshape(attn, (B, H, S, S, 1)) * ad.reshape(v, (B, H, 1, S, dh)), axis=-2)
    else:
        ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
    y = x + ad.matmul(ctx, P[f"{name}.Wo"]) + P[f"{name}.bo"]
    ff_in = _layer_norm(P, f"{name}.ln2", y) if spec.layer_norm else y
    y = y + mlp_forward(P, f"{name}.ff", MLPSpec(d, (spec.hidden,), d, spec.activation), ff_in)
    has_key = mask.any(-1)[..., None]
    return ad.where(has_key, y, x)
