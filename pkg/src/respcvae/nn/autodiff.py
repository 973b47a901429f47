"""A small reverse-mode automatic differentiation tape over numpy arrays.

Only the operations the models here need are provided. Each ``Var`` keeps
its value, its parents and a closure mapping the output gradient to parent
gradients. :meth:`Var.backward` walks the graph in reverse topological
order.

Broadcasting follows numpy; parent gradients are summed back to the parent
shape.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim = len(shape)
    while grad.ndim > ndim:
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    # -- graph -------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def param(value):
    """Leaf that accumulates a gradient."""
    return Var(value, requires_grad=True)


def const(value):
    return value if isinstance(value, Var) else Var(value)


def _wrap(x):
    return x if isinstance(x, Var) else Var(x)


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value
    return Var(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
    )


def power(a, p):
    a = _wrap(a)
    return Var(a.value**p, (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a):
    a = _wrap(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = _wrap(a)
    pos = a.value > 0
    return Var(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def softplus(a):
    a = _wrap(a)
    out = np.logaddexp(0.0, a.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Var(out, (a,), lambda g: (g * sig,))


def clip(a, lo=None, hi=None):
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = _wrap(a)
    out = np.clip(a.value, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.value >= lo
    if hi is not None:
        inside &= a.value <= hi
    return Var(out, (a,), lambda g: (g * inside,))


def where(cond, a, b):
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    return Var(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# -- reductions and shape ---------------------------------------------------------
def vsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Var(out, (a,), bw)


def ordered_sum(a, axis=-1):
    """Sum along one axis by strict left-to-right accumulation.

    Unlike :func:`vsum` (pairwise/SIMD summation whose association depends
    on the axis length) the result does not change when exact zeros are
    inserted anywhere along the axis.
    """
    a = _wrap(a)
    x = np.moveaxis(a.value, axis, 0)
    out = np.zeros(x.shape[1:])
    for k in range(x.shape[0]):
        out = out + x[k]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Var(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return vsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = _wrap(a)
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _wrap(a)
    inv = None if axes is None else np.argsort(axes)
    return Var(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    a = _wrap(a)
    return Var(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    a = _wrap(a)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), bw)


def concat(xs, axis=-1):
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return Var(
        np.concatenate([x.value for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(xs, axis=0):
    xs = [_wrap(x) for x in xs]
    return Var(
        np.stack([x.value for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def broadcast_to(a, shape):
    a = _wrap(a)
    return Var(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- linear algebra ---------------------------------------------------------------
def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            gb = np.tensordot(g, av, axes=(tuple(range(g.ndim)), tuple(range(av.ndim - 1))))
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Var(a.value @ b.value, (a, b), bw)


# -- softmax family ---------------------------------------------------------------
def softmax(a, axis=-1, mask=None, ordered=False):
    """Softmax along ``axis``; entries with ``mask == False`` get exactly 0.

    Rows where every entry is masked return all zeros. ``ordered`` uses a
    left-to-right normaliser sum (see :func:`ordered_sum`).
    """
    a = _wrap(a)
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.expand_dims(ordered_sum(e, axis).value, axis) if ordered else e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Var(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)
    return Var(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# -- user-defined ---------------------------------------------------------------
def custom(value, inputs, vjp):
    """Node with a user-supplied vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or ``None``) per entry of ``inputs``.
    """
    return Var(value, tuple(_wrap(x) for x in inputs), vjp)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)
