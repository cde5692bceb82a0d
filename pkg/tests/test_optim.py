import numpy as np
import pytest

from dlqat.optim import OptimizerState, adamw_step
from dlqat.reference import adamw_scalar
from dlqat.tensor import Tensor


def run(p0, grads, lr, **kw):
    p = Tensor(np.array([p0]), requires_grad=True)
    state = OptimizerState(**kw)
    out = []
    for g in grads:
        p.grad = np.array([g])
        adamw_step({"p": p}, state, lr)
        out.append(float(p.data[0]))
    return out


def test_first_step_with_unit_gradient():
    # sqrt(1e-3) / (sqrt(1e-3) + 1e-8), worked by hand
    (p,) = run(0.0, [1.0], 1e-3)
    assert p == pytest.approx(-1e-3 * 0.99999968377233, abs=1e-15)


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_matches_scalar_reference(wd):
    grads = [1.0] * 5 + [-0.3, 2.0, 0.0, 0.7]
    ours = run(0.5, grads, 1e-2, weight_decay=wd)
    ref = adamw_scalar(0.5, grads, 1e-2, weight_decay=wd)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)


def test_zero_gradient_no_decay_is_a_no_op():
    assert run(0.25, [0.0, 0.0, 0.0], 1e-2) == [0.25] * 3


def test_identical_parameters_identical_trajectories(rng):
    state = OptimizerState()
    a = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(10):
        g = rng.normal(size=2)
        a.grad, b.grad = g.copy(), g.copy()
        adamw_step({"a": a, "b": b}, state, 1e-2)
    assert a.data.tobytes() == b.data.tobytes()


def test_missing_gradient():
    with pytest.raises(ValueError, match="q"):
        adamw_step({"q": Tensor([1.0], requires_grad=True)}, OptimizerState(), 1e-3)


def test_state_only_for_current_parameters():
    state = OptimizerState()
    a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    a.grad = b.grad = np.array([1.0])
    adamw_step({"a": a}, state, 1e-3)
    adamw_step({"b": b}, state, 1e-3)
    assert set(state.exp_avg) == {"b"}
