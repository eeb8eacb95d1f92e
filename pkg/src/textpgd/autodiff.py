"""Minimal reverse-mode automatic differentiation over numpy arrays.

The graph is built eagerly: every op returns a :class:`Var` holding the
forward value and a closure that routes the output gradient back to its
parents. Only the handful of ops needed by the encoder, the classifier
heads and the attack objective are implemented, each with a hand-written
backward. All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph: a float64 array plus its gradient."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Var) else -other)

    def __mul__(self, s):
        # scalar multiply only; tensor products go through matmul
        return scale(self, s)

    __rmul__ = __mul__


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def backward(out: Var) -> None:
    """Backpropagate from a scalar output through the whole graph."""
    if out.value.ndim != 0:
        raise ValueError("backward requires a scalar output")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Var, b) -> Var:
    b = as_var(b)
    out = Var(a.value + b.value, (a, b))

    def back(g):
        a._accumulate(_unbroadcast(g, a.value.shape))
        b._accumulate(_unbroadcast(g, b.value.shape))

    out._backward = back
    return out


def scale(a: Var, s: float) -> Var:
    s = float(s)
    out = Var(a.value * s, (a,))
    out._backward = lambda g: a._accumulate(g * s)
    return out


def matmul(a: Var, b: Var) -> Var:
    out = Var(a.value @ b.value, (a, b))

    def back(g):
        a._accumulate(g @ b.value.T)
        if a.value.ndim == 1:
            b._accumulate(np.outer(a.value, g))
        else:
            b._accumulate(a.value.T @ g)

    out._backward = back
    return out


def matmul_t(a: Var, b: Var) -> Var:
    """a @ b.T, used for attention scores and the tied MLM head."""
    out = Var(a.value @ b.value.T, (a, b))

    def back(g):
        a._accumulate(g @ b.value)
        b._accumulate(g.T @ a.value)

    out._backward = back
    return out


def relu(a: Var) -> Var:
    mask = a.value > 0
    out = Var(a.value * mask, (a,))
    out._backward = lambda g: a._accumulate(g * mask)
    return out


def softmax_rows(a: Var) -> Var:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Var(s, (a,))

    def back(g):
        a._accumulate((g - (g * s).sum(axis=-1, keepdims=True)) * s)

    out._backward = back
    return out


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Row-wise layer normalization with learned gain and bias."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Var(xhat * gain.value + bias.value, (x, gain, bias))
    n = x.value.shape[-1]

    def back(g):
        gain._accumulate(_unbroadcast(g * xhat, gain.value.shape))
        bias._accumulate(_unbroadcast(g, bias.value.shape))
        gx = g * gain.value
        a = gx.sum(axis=-1, keepdims=True)
        b = (gx * xhat).sum(axis=-1, keepdims=True)
        x._accumulate(inv * (gx - a / n - xhat * b / n))

    out._backward = back
    return out


def mean_rows(x: Var) -> Var:
    """Mean over axis 0: [n x d] -> [d]."""
    n = x.value.shape[0]
    out = Var(x.value.mean(axis=0), (x,))
    out._backward = lambda g: x._accumulate(np.broadcast_to(g / n, x.value.shape))
    return out


def gather_rows(table: Var, ids) -> Var:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    out = Var(table.value[ids], (table,))

    def back(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, ids, g)
        table._accumulate(acc)

    out._backward = back
    return out


def select_rows(x: Var, idx) -> Var:
    """Select a subset of rows of x by position index."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Var(x.value[idx], (x,))

    def back(g):
        acc = np.zeros_like(x.value)
        np.add.at(acc, idx, g)
        x._accumulate(acc)

    out._backward = back
    return out


def cross_entropy_rows(logits: Var, targets) -> Var:
    """Mean cross-entropy of each logit row against its target index."""
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    n = logits.value.shape[0]
    out = Var(-logp[np.arange(n), targets].mean(), (logits,))
    probs = np.exp(logp)

    def back(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        logits._accumulate(g * d / n)

    out._backward = back
    return out


def cross_entropy(logits: Var, y: int) -> Var:
    """Cross-entropy of a single logit vector against label y."""
    z = logits.value - logits.value.max()
    logsumexp = np.log(np.exp(z).sum())
    out = Var(logsumexp - z[y], (logits,))
    probs = np.exp(z - logsumexp)

    def back(g):
        d = probs.copy()
        d[y] -= 1.0
        logits._accumulate(g * d)

    out._backward = back
    return out


def cosine_to(u: Var, v: np.ndarray) -> Var:
    """Cosine similarity between a variable vector and a constant vector."""
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u.value)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("degenerate representation")
    c = float(u.value @ v / (nu * nv))
    out = Var(c, (u,))

    def back(g):
        out_grad = v / (nu * nv) - c * u.value / (nu * nu)
        u._accumulate(g * out_grad)

    out._backward = back
    return out
