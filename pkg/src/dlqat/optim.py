"""AdamW with decoupled weight decay, in the Hugging Face ``adamw_hf`` form.

Per step t with gradient g:

    m = beta1 m + (1 - beta1) g
    v = beta2 v + (1 - beta2) g^2
    p -= lr * sqrt(1 - beta2^t) / (1 - beta1^t) * m / (sqrt(v) + eps)
    p -= lr * weight_decay * p
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Update ``params`` in place from their ``.grad``.

    The moment dictionaries end up holding exactly the keys of ``params``.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for trainable parameter(s): {', '.join(missing)}")
    stale = set(state.exp_avg) - set(params)
    for name in stale:
        del state.exp_avg[name], state.exp_avg_sq[name]

    state.step += 1
    t = state.step
    step_size = lr * math.sqrt(1.0 - state.beta2**t) / (1.0 - state.beta1**t)
    for name, p in params.items():
        g = p.grad
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - step_size * (m / (np.sqrt(v) + state.eps))
        if state.weight_decay:
            p.data = p.data - lr * state.weight_decay * p.data
