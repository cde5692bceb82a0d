"""The quantizer by hand: grid, initialization, fake quantization, STE gradients."""

import numpy as np

from dlqat.quant import QuantSpec, dequantize, fake_quantize, init_scale_bias, minmax_per_group, quantize_ints
from dlqat.tensor import Tensor

# A 4-bit grid runs from -8 to 7.  Map the range [-1, 1] onto its endpoints.
s, b = init_scale_bias(-1.0, 1.0, bits=4)
print(f"s = {float(s):.6f} (2/15), b = {float(b):.6f} (1/15)")
print("grid endpoints decode to", float(s * -8 + b), "and", float(s * 7 + b))

# Group-wise: each output row is cut into contiguous runs of g input columns.
rng = np.random.default_rng(0)
w = rng.normal(size=(2, 8))
spec = QuantSpec(bits=3, group_size=4)
lo, hi = minmax_per_group(w, spec)
s, b = init_scale_bias(lo, hi, spec.bits)
q = quantize_ints(w, s, b, spec.bits)
print("\ninteger grid (3-bit, groups of 4):\n", q.astype(int))
print("max reconstruction error:", np.abs(dequantize(q, s, b) - w).max(), "<= s/2 =", s.max() / 2)

# Straight-through gradients: round acts as identity, clip gates W and b.
m = np.ones_like(s)
W, S, B, M = (Tensor(x, requires_grad=True) for x in (w, s * 0.7, b, m))
fake_quantize(W, S, B, M, spec.bits).sum().backward()
print("\ndWq/dW (0 where the shrunken range clips):\n", W.grad)
print("dWq/db per group (counts clipped elements):\n", B.grad)
print("dWq/dm per group (sum of dequantized values):\n", M.grad)
