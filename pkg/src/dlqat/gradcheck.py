"""Gradient verification suite.

Smooth ops are checked against central finite differences.  The quantizer's
straight-through rules cannot be checked that way (the true derivative of a
rounded function is zero almost everywhere), so they are compared with the
scalar closed-form oracle in :mod:`dlqat.reference` instead.  The magnitude
gradient is exact under finite differences because the output is linear in m.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import reference
from . import tensor as T
from .quant import QuantSpec, fake_quantize, init_scale_bias, minmax_per_group
from .tensor import Tensor

FD_STEP = 1e-3
SMOOTH_TOL = 1e-4
MAGNITUDE_TOL = 1e-5
# central differences at h=1e-3 carry ~1e-6 absolute truncation error, which
# is meaningless relative to a derivative that happens to cross zero
REL_FLOOR = 1e-2


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    kind: str

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.kind:<10} {self.name:<22} max err {self.max_error:.3e}  (tol {self.tolerance:.0e})"


def relative_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(
    fn: Callable[..., Tensor],
    inputs: list[np.ndarray],
    rng: np.random.Generator,
    n_points: int = 100,
    h: float = FD_STEP,
) -> float:
    """Max relative error between autodiff and central differences.

    The scalar probed is sum(weights * fn(*inputs)) with fixed random weights;
    ``n_points`` coordinates are drawn across all inputs.
    """
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)

    def scalar(arrays):
        with T.no_grad():
            return float(np.sum(weights * fn(*[Tensor(a) for a in arrays]).data))

    (out * weights).sum().backward()
    sizes = np.array([x.size for x in inputs])
    worst = 0.0
    for _ in range(n_points):
        which = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        idx = int(rng.integers(inputs[which].size))
        plus = [x.copy() for x in inputs]
        minus = [x.copy() for x in inputs]
        plus[which].reshape(-1)[idx] += h
        minus[which].reshape(-1)[idx] -= h
        numeric = (scalar(plus) - scalar(minus)) / (2 * h)
        analytic = float(leaves[which].grad.reshape(-1)[idx])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _smooth_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    n = rng.normal
    ids = rng.integers(0, 10, size=(3, 4))
    targets = rng.integers(0, 7, size=(2, 5))
    cos, sin = F.rotary_tables(6, 8)
    mask = np.tril(np.ones((5, 5), dtype=bool))
    return {
        "matmul": (T.matmul, [n(size=(4, 5)), n(size=(5, 3))]),
        "matmul_batched": (T.matmul, [n(size=(2, 3, 4, 5)), n(size=(2, 3, 5, 2))]),
        "add_broadcast": (T.add, [n(size=(4, 6)), n(size=(4, 1))]),
        "sub": (T.sub, [n(size=(3, 4)), n(size=(1, 4))]),
        "mul_broadcast": (T.mul, [n(size=(4, 6)), n(size=(4, 1))]),
        "div": (T.div, [n(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))]),
        "exp": (T.exp, [n(size=(3, 4))]),
        "log": (T.log, [rng.uniform(0.5, 3.0, size=(3, 4))]),
        "power": (lambda x: T.power(x, 3.0), [rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))]),
        "sum_axis": (lambda x: T.tensor_sum(x, axis=1), [n(size=(3, 4))]),
        "mean": (lambda x: T.mean(x, axis=0, keepdims=True), [n(size=(3, 4))]),
        "transpose": (lambda x: T.transpose(x, (1, 0, 2)) * 1.5, [n(size=(2, 3, 4))]),
        "softmax": (lambda x: F.softmax(x, axis=-1), [n(size=(3, 6))]),
        "softmax_masked": (lambda x: F.softmax(x, axis=-1, mask=mask), [n(size=(2, 5, 5))]),
        "log_softmax": (lambda x: F.log_softmax(x, axis=-1), [n(size=(3, 6))]),
        "silu": (F.silu, [n(size=(3, 5))]),
        "rmsnorm": (lambda x: F.rmsnorm(x), [n(size=(3, 8))]),
        "rmsnorm_gain": (F.rmsnorm, [n(size=(2, 3, 8)), n(size=(8,))]),
        "embedding": (lambda t: F.embedding(t, ids), [n(size=(10, 4))]),
        "cross_entropy": (lambda z: F.cross_entropy(z, targets), [n(size=(2, 5, 7))]),
        "rope": (lambda x: F.rope(x, cos, sin), [n(size=(2, 6, 8))]),
        "linear": (F.linear, [n(size=(2, 3, 5)), n(size=(4, 5))]),
        "mlp_composite": (_mlp, [n(size=(4, 6)), n(size=(8, 6)), n(size=(3, 8))]),
    }


def _mlp(x, w1, w2):
    h = F.silu(F.linear(F.rmsnorm(x), w1))
    return F.log_softmax(F.linear(h, w2))


def check_smooth_ops(seed: int = 0, n_points: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in _smooth_cases(rng).items():
        err = fd_check(fn, inputs, rng, n_points=n_points)
        results.append(CheckResult(name, err, SMOOTH_TOL, "fd"))
    return results


def _quant_case(rng: np.random.Generator, bits: int, spec: QuantSpec, shape=(6, 16)):
    w = rng.normal(size=shape)
    lo, hi = minmax_per_group(w, spec)
    s, b = init_scale_bias(lo, hi, bits)
    # shrink the range a little so some elements clip
    s = s * rng.uniform(0.6, 1.1, size=s.shape)
    b = b + rng.normal(scale=0.1, size=b.shape)
    m = rng.uniform(0.5, 1.5, size=s.shape)
    return w, s, b, m


def check_magnitude_gradient(seed: int = 0, n_cases: int = 20) -> CheckResult:
    """Finite differences in m are exact up to roundoff: the output is linear in m."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(n_cases):
        bits = int(rng.integers(2, 9))
        spec = QuantSpec(bits, None if case % 2 else 4)
        w, s, b, m = _quant_case(rng, bits, spec)
        fn = lambda m_: fake_quantize(Tensor(w), Tensor(s), Tensor(b), m_, bits)  # noqa: E731
        worst = max(worst, fd_check(fn, [m], rng, n_points=5))
    return CheckResult("magnitude (m)", worst, MAGNITUDE_TOL, "fd-exact")


def check_ste_rules(seed: int = 0, n_cases: int = 20) -> list[CheckResult]:
    """Autodiff W/s/b/m gradients of the quantizer versus the scalar closed form."""
    rng = np.random.default_rng(seed)
    worst = {"W": 0.0, "s": 0.0, "b": 0.0, "m": 0.0}
    for case in range(n_cases):
        bits = int(rng.integers(2, 9))
        spec = QuantSpec(bits, None if case % 2 else 4)
        w, s, b, m = _quant_case(rng, bits, spec)
        up = rng.normal(size=w.shape)
        leaves = {k: Tensor(v, requires_grad=True) for k, v in (("W", w), ("s", s), ("b", b), ("m", m))}
        out = fake_quantize(leaves["W"], leaves["s"], leaves["b"], leaves["m"], bits)
        (out * up).sum().backward()
        expected = reference.ste_gradients_matrix(w.tolist(), s.tolist(), b.tolist(), m.tolist(), bits, up.tolist())
        for k in worst:
            diff = np.max(np.abs(leaves[k].grad - np.array(expected[k])))
            worst[k] = max(worst[k], float(diff))
    return [CheckResult(f"ste d/d{k}", v, 0.0, "closed-form") for k, v in worst.items()]


def run_all(seed: int = 0) -> list[CheckResult]:
    return [*check_smooth_ops(seed), check_magnitude_gradient(seed), *check_ste_rules(seed)]
