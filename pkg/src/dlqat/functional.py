"""Neural-net primitives with hand-written backward rules."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, swap_last


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.  ``mask`` (broadcastable bool) marks entries kept."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return Tensor.from_op(out, (x,), lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),))


def rmsnorm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis, times an optional gain."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    parents = (x,) if weight is None else (x, weight)
    out = normed if weight is None else normed * weight.data

    def backward(g):
        gn = g if weight is None else g * weight.data
        gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        if weight is None:
            return (gx,)
        gw = (g * normed).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        return gx, gw

    return Tensor.from_op(out, parents, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor.from_op(table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood (nats) of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets).reshape(-1)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    flat = logits.data.reshape(-1, vocab)
    if flat.shape[0] != targets.size:
        raise ValueError("logits and targets disagree on the number of positions")
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = targets.size
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return ((g / n) * grad.reshape(logits.shape),)

    return Tensor.from_op(np.asarray(loss), (logits,), backward)


def rotary_tables(length: int, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (length, head_dim) for rotate-half rotary embeddings."""
    if head_dim % 2:
        raise ValueError("rotary embeddings need an even head dimension")
    freqs = base ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = np.outer(np.arange(length), freqs)
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Apply rotary position encoding along the last axis; positions on axis -2."""
    t = x.shape[-2]
    c, s = cos[:t], sin[:t]
    out = x.data * c + _rotate_half(x.data) * s
    return Tensor.from_op(out, (x,), lambda g: (g * c + _rotate_half_t(g * s),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight^T (+ bias) with tokens on the leading axes."""
    y = as_tensor(x) @ swap_last(weight)
    return y if bias is None else y + bias
