"""A small reverse-mode differentiation tape over numpy arrays.

Only the handful of fused operations the transformer needs are provided.
Each op computes its value eagerly and records a closure that pushes the
output gradient back into its inputs.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "add",
    "attention",
    "dropout",
    "embed",
    "gelu",
    "layer_norm",
    "linear",
    "matmul_transposed",
]


class Node:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = True, name: str | None = None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records backward closures in execution order; single use."""

    def __init__(self):
        self._closures = []
        self.output: Node | None = None
        self.used = False

    def record(self, fn) -> None:
        self._closures.append(fn)

    def backward(self, output_grad: np.ndarray) -> None:
        if self.used:
            raise RuntimeError("tape already consumed")
        if self.output is None:
            raise RuntimeError("tape has no output node")
        self.used = True
        self.output.grad = np.asarray(output_grad, dtype=self.output.value.dtype)
        for fn in reversed(self._closures):
            fn()
        self._closures.clear()


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _needs(*nodes: Node) -> bool:
    return any(n.requires_grad for n in nodes)


def add(tape: Tape, a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, _needs(a, b))

    def back():
        if out.grad is None:
            return
        a.accumulate(_sum_to_shape(out.grad, a.shape))
        b.accumulate(_sum_to_shape(out.grad, b.shape))

    tape.record(back)
    return out


def embed(tape: Tape, table: Node, ids: np.ndarray, scale: float = 1.0) -> Node:
    out = Node(table.value[ids] * scale, table.requires_grad)

    def back():
        if out.grad is None or not table.requires_grad:
            return
        g = np.zeros_like(table.value)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[-1]) * scale)
        table.accumulate(g)

    tape.record(back)
    return out


def linear(tape: Tape, x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w + b`` with ``w`` stored as (in_features, out_features)."""
    y = x.value @ w.value
    if b is not None:
        y = y + b.value
    out = Node(y, _needs(x, w, *( [b] if b is not None else [])))

    def back():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            w.accumulate(x.value.reshape(-1, x.shape[-1]).T @ g2)
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ w.value.T)

    tape.record(back)
    return out


def matmul_transposed(tape: Tape, x: Node, w: Node) -> Node:
    """``x @ w.T``; used for the output projection tied to the embedding table."""
    out = Node(x.value @ w.value.T, _needs(x, w))

    def back():
        g = out.grad
        if g is None:
            return
        if w.requires_grad:
            w.accumulate(g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.shape[-1]))
        if x.requires_grad:
            x.accumulate(g @ w.value)

    tape.record(back)
    return out


def layer_norm(tape: Tape, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Node(xhat * gamma.value + beta.value, _needs(x, gamma, beta))

    def back():
        g = out.grad
        if g is None:
            return
        d = x.shape[-1]
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.value
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x.accumulate(dx)

    tape.record(back)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(tape: Tape, x: Node) -> Node:
    """tanh approximation of GELU (smooth, so finite differences behave)."""
    v = x.value
    u = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(u)
    out = Node(0.5 * v * (1.0 + t), x.requires_grad)

    def back():
        if out.grad is None or not x.requires_grad:
            return
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        x.accumulate(out.grad * deriv)

    tape.record(back)
    return out


def dropout(tape: Tape, x: Node, rate: float, rng: np.random.Generator | None) -> Node:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)
    out = Node(x.value * keep, x.requires_grad)

    def back():
        if out.grad is not None:
            x.accumulate(out.grad * keep)

    tape.record(back)
    return out


def attention(tape: Tape, q: Node, k: Node, v: Node, num_heads: int,
              mask: np.ndarray | None) -> Node:
    """Multi-head scaled dot-product attention on already-projected inputs.

    q: (B, Tq, D); k, v: (B, Tk, D); mask broadcastable to (B, Tq, Tk) with
    True where attention is allowed. Every query row must allow at least one key.
    """
    B, Tq, D = q.shape
    Tk = k.shape[1]
    dh = D // num_heads
    scale = 1.0 / math.sqrt(dh)

    def split(a, T):
        return a.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.value, Tq), split(k.value, Tk), split(v.value, Tk)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        scores = np.where(mask[:, None, :, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = p @ vh
    out = Node(ctx.transpose(0, 2, 1, 3).reshape(B, Tq, D), _needs(q, k, v))

    def back():
        g = out.grad
        if g is None:
            return
        gh = split(g, Tq)
        if v.requires_grad:
            v.accumulate((p.transpose(0, 1, 3, 2) @ gh).transpose(0, 2, 1, 3).reshape(B, Tk, D))
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            q.accumulate((ds @ kh).transpose(0, 2, 1, 3).reshape(B, Tq, D))
        if k.requires_grad:
            k.accumulate((ds.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(B, Tk, D))

    tape.record(back)
    return out
