"""Scalar, loop-based reference implementations used as independent oracles.

Nothing here is vectorized: each function walks elements one at a time with
plain Python floats so it shares no code path with the numpy versions.
"""

from __future__ import annotations

import math


def round_half_even(x: float) -> float:
    return float(round(x))


def quantize_scalar(w: float, s: float, b: float, bits: int) -> int:
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    q = round_half_even((w - b) / s)
    return int(min(max(q, qmin), qmax))


def fake_quantize_matrix(weight, s, b, m, bits: int) -> list[list[float]]:
    """Element-by-element m * (s * q + b); ``m=None`` omits the magnitude."""
    rows, cols = len(weight), len(weight[0])
    n_groups = len(s[0])
    g = cols // n_groups
    out = []
    for i in range(rows):
        row = []
        for j in range(cols):
            k = j // g
            q = float(quantize_scalar(float(weight[i][j]), float(s[i][k]), float(b[i][k]), bits))
            inner = float(s[i][k]) * q + float(b[i][k])
            row.append(inner if m is None else float(m[i][k]) * inner)
        out.append(row)
    return out


def ste_gradients_matrix(weight, s, b, m, bits: int, upstream) -> dict[str, list[list[float]]]:
    """Closed-form straight-through gradients, one element at a time."""
    rows, cols = len(weight), len(weight[0])
    n_groups = len(s[0])
    g = cols // n_groups
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    gw = [[0.0] * cols for _ in range(rows)]
    gs = [[0.0] * n_groups for _ in range(rows)]
    gb = [[0.0] * n_groups for _ in range(rows)]
    gm = [[0.0] * n_groups for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            k = j // g
            si, bi = float(s[i][k]), float(b[i][k])
            mi = 1.0 if m is None else float(m[i][k])
            up = float(upstream[i][j])
            u = (float(weight[i][j]) - bi) / si
            q = float(min(max(round_half_even(u), qmin), qmax))
            scaled = up * mi
            if qmin <= u <= qmax:
                gw[i][j] = scaled
                gs[i][k] += scaled * (q - u)
                gb[i][k] += 0.0
            else:
                gw[i][j] = 0.0
                gs[i][k] += scaled * q
                gb[i][k] += scaled
            gm[i][k] += up * (si * q + bi)
    out = {"W": gw, "s": gs, "b": gb}
    if m is not None:
        out["m"] = gm
    return out


def pack_bits_scalar(values, bits: int) -> bytes:
    """Bit-at-a-time LSB-first packer."""
    total = len(values) * bits
    buf = bytearray((total + 7) // 8)
    pos = 0
    for v in values:
        for k in range(bits):
            if (int(v) >> k) & 1:
                buf[pos // 8] |= 1 << (pos % 8)
            pos += 1
    return bytes(buf)


def matmul_loops(a, b) -> list[list[float]]:
    n, k, p = len(a), len(b), len(b[0])
    return [[sum(float(a[i][t]) * float(b[t][j]) for t in range(k)) for j in range(p)] for i in range(n)]


def adamw_scalar(p: float, grads, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Trajectory of one scalar under the decoupled-decay update, one step per gradient."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = lr * math.sqrt(1.0 - beta2**t) / (1.0 - beta1**t)
        p = p - step * (m / (math.sqrt(v) + eps))
        p = p - lr * weight_decay * p
        out.append(p)
    return out
