"""Asymmetric group-wise fake quantization with a learnable group magnitude.

Weights of shape (C_out, C_in) are split into groups of ``g`` consecutive
input columns within each output row; per-channel quantization is the special
case ``g == C_in``.  Every group carries a scale ``s``, an offset ``b`` and a
magnitude ``m``, all shaped (C_out, C_in // g).

The quantizer is

    q  = clip(round((W - b) / s), -2**(n-1), 2**(n-1) - 1)
    Wq = m * (s * q + b)

with round-half-to-even.  Gradients follow the straight-through convention
used by learned-step-size quantizers; see :func:`ste_gradients`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width plus granularity.  ``group_size=None`` means per-channel."""

    bits: int = 4
    group_size: int | None = None

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ValueError(f"group size must be positive, got {self.group_size}")

    @property
    def per_channel(self) -> bool:
        return self.group_size is None

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def group_width(self, c_in: int) -> int:
        if self.group_size is None:
            return c_in
        if c_in % self.group_size:
            raise ValueError(f"group size {self.group_size} does not divide C_in={c_in}")
        return self.group_size

    def param_shape(self, c_out: int, c_in: int) -> tuple[int, int]:
        return c_out, c_in // self.group_width(c_in)

    def n_groups(self, c_out: int, c_in: int) -> int:
        rows, cols = self.param_shape(c_out, c_in)
        return rows * cols


@dataclass
class QuantParams:
    """Per-group scale, offset and magnitude for one weight matrix."""

    s: Tensor
    b: Tensor
    m: Tensor
    frozen_sb: bool = False

    def __post_init__(self):
        if not (self.s.shape == self.b.shape == self.m.shape):
            raise ValueError("s, b and m must share one shape")
        if np.any(self.s.data <= 0):
            raise ValueError("scale s must be positive")

    @classmethod
    def from_weight(cls, weight: np.ndarray, spec: QuantSpec) -> QuantParams:
        """Min-max initialization of s, b; m starts at ones."""
        lo, hi = minmax_per_group(weight, spec)
        s, b = init_scale_bias(lo, hi, spec.bits)
        return cls(Tensor(s, name="s"), Tensor(b, name="b"), Tensor(np.ones_like(s), name="m"))


def _grouped(w: np.ndarray, n_cols: int) -> np.ndarray:
    """View (C_out, C_in) as (C_out, n_cols, g)."""
    c_out, c_in = w.shape
    if c_in % n_cols:
        raise ValueError(f"{n_cols} groups do not tile C_in={c_in}")
    return w.reshape(c_out, n_cols, c_in // n_cols)


def _expand(p: np.ndarray, c_in: int) -> np.ndarray:
    """Broadcast per-group values (C_out, G) to (C_out, C_in)."""
    return np.repeat(p, c_in // p.shape[1], axis=1)


def _group_sum(x: np.ndarray, n_cols: int) -> np.ndarray:
    """Sum each group left to right; cumsum fixes the summation order."""
    return np.cumsum(_grouped(x, n_cols), axis=-1)[..., -1]


def minmax_per_group(weight: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(weight, dtype=np.float64)
    groups = _grouped(w, spec.param_shape(*w.shape)[1])
    return groups.min(axis=-1), groups.max(axis=-1)


def init_scale_bias(lo, hi, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Map [lo, hi] onto the integer grid endpoints [-2**(n-1), 2**(n-1) - 1].

    A degenerate group (lo == hi) gets the floor scale and offset ``lo`` so it
    quantizes exactly to itself.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi < lo):
        raise ValueError("Max must not be below Min")
    levels = 2.0**bits - 1.0
    half = 2.0 ** (bits - 1)
    flat = hi == lo
    s = np.where(flat, SCALE_FLOOR, (hi - lo) / levels)
    b = np.where(flat, lo, (half * hi + (half - 1.0) * lo) / levels)
    return s, b


def quantize_ints(weight, s, b, bits: int) -> np.ndarray:
    """Integer grid values (stored as float) for ``weight`` under per-group s, b."""
    w = np.asarray(weight, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scale s must be positive")
    c_in = w.shape[1]
    u = (w - _expand(b, c_in)) / _expand(s, c_in)
    return np.clip(np.rint(u), -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)


def dequantize(q, s, b, m=None) -> np.ndarray:
    """m * (s * q + b) with per-group broadcast; ``m=None`` drops the magnitude."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if s.shape != b.shape or (m is not None and np.shape(m) != s.shape):
        raise ValueError("group metadata shapes disagree")
    if q.ndim != 2 or q.shape[0] != s.shape[0] or q.shape[1] % s.shape[1]:
        raise ValueError(f"grid shape {q.shape} does not match group shape {s.shape}")
    c_in = q.shape[1]
    inner = _expand(s, c_in) * q + _expand(b, c_in)
    if m is None:
        return inner
    return _expand(np.asarray(m, dtype=np.float64), c_in) * inner


def ste_gradients(weight, s, b, m, bits: int, upstream) -> dict[str, np.ndarray]:
    """Straight-through gradients of Wq = m * (s * q + b).

    With u = (W - b) / s and ``inside`` meaning qmin <= u <= qmax:

        dWq/dW = m inside, 0 outside
        dWq/ds = m * (q - u) inside, m * q outside
        dWq/db = 0 inside, m outside
        dWq/dm = s * q + b

    Per-group terms are summed over the group's elements.
    """
    w = np.asarray(weight, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    c_in = w.shape[1]
    n_cols = np.shape(s)[1]
    s_full = _expand(np.asarray(s, dtype=np.float64), c_in)
    b_full = _expand(np.asarray(b, dtype=np.float64), c_in)
    m_full = 1.0 if m is None else _expand(np.asarray(m, dtype=np.float64), c_in)
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    u = (w - b_full) / s_full
    q = np.clip(np.rint(u), qmin, qmax)
    inside = (u >= qmin) & (u <= qmax)
    gm = g * m_full
    grads = {
        "W": np.where(inside, gm, 0.0),
        "s": _group_sum(gm * np.where(inside, q - u, q), n_cols),
        "b": _group_sum(np.where(inside, 0.0, gm), n_cols),
    }
    if m is not None:
        grads["m"] = _group_sum(g * (s_full * q + b_full), n_cols)
    return grads


def fake_quantize(
    weight: Tensor, s: Tensor, b: Tensor, m: Tensor | None, bits: int
) -> Tensor:
    """Quantize-dequantize ``weight`` in the forward pass, STE in the backward."""
    q = quantize_ints(weight.data, s.data, b.data, bits)
    out = dequantize(q, s.data, b.data, None if m is None else m.data)
    parents = (weight, s, b) if m is None else (weight, s, b, m)

    def backward(upstream):
        grads = ste_gradients(
            weight.data, s.data, b.data, None if m is None else m.data, bits, upstream
        )
        result = [grads["W"], grads["s"], grads["b"]]
        if m is not None:
            result.append(grads["m"])
        return result

    return Tensor.from_op(out, parents, backward)


def fake_quantize_activation(x: Tensor, bits: int = 8) -> Tensor:
    """Dynamic per-tensor asymmetric min-max fake quantization.

    Scale and offset are recomputed from ``x`` on every call, so the clip
    range is [min(x), max(x)] and holds every element.  The range is tested on
    x itself: (max(x) - b) / s can land a hair above qmax in floating point,
    which would wrongly cut the gradient of the largest element.
    """
    lo, hi = x.data.min(), x.data.max()
    s, b = init_scale_bias(lo, hi, bits)
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    q = np.clip(np.rint((x.data - b) / s), qmin, qmax)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(s * q + b, (x,), lambda g: (g * inside,))
