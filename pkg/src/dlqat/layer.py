"""The DL-QAT linear layer and the six ablation settings."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .quant import (
    SCALE_FLOOR,
    QuantParams,
    QuantSpec,
    fake_quantize,
    fake_quantize_activation,
    init_scale_bias,
    minmax_per_group,
)
from .tensor import Tensor


class ClipMode(enum.Enum):
    MINMAX = "MinMax"
    LEARN_THEN_FIX = "Learn then fix"
    LEARN = "Learn"


class Phase(enum.Enum):
    WARMUP = "warmup"
    MAIN = "main"


class AblationSetting(enum.Enum):
    """Magnitude on/off crossed with three clipping-bound strategies."""

    S1 = (1, False, ClipMode.MINMAX)
    S2 = (2, False, ClipMode.LEARN_THEN_FIX)
    S3 = (3, False, ClipMode.LEARN)
    S4 = (4, True, ClipMode.MINMAX)
    S5 = (5, True, ClipMode.LEARN_THEN_FIX)
    S6 = (6, True, ClipMode.LEARN)

    @property
    def index(self) -> int:
        return self.value[0]

    @property
    def magnitude_enabled(self) -> bool:
        return self.value[1]

    @property
    def clip_mode(self) -> ClipMode:
        return self.value[2]

    @property
    def has_warmup(self) -> bool:
        return self.clip_mode is not ClipMode.MINMAX

    @classmethod
    def from_index(cls, index: int) -> AblationSetting:
        for setting in cls:
            if setting.index == index:
                return setting
        raise ValueError(f"ablation setting must be 1..6, got {index}")

    def label(self) -> dict[str, str]:
        """Row labels in the layout of the published ablation table."""
        if self.has_warmup and self.clip_mode is ClipMode.LEARN_THEN_FIX:
            params = "s,b then " + ",".join(sorted_kinds(trainable_kinds(self, Phase.MAIN)))
        else:
            params = ",".join(sorted_kinds(trainable_kinds(self, Phase.MAIN)))
        return {
            "setting": str(self.index),
            "m": "Learn" if self.magnitude_enabled else "N/A",
            "clipping": self.clip_mode.value,
            "learnable": params,
        }


DLQAT = AblationSetting.S5

_KIND_ORDER = ("m", "s", "b", "A", "B")


def sorted_kinds(kinds) -> list[str]:
    return [k for k in _KIND_ORDER if k in kinds]


def trainable_kinds(setting: AblationSetting, phase: Phase) -> frozenset[str]:
    """Names of the parameter kinds optimized in ``phase`` under ``setting``.

    The frozen base weight is never among them.
    """
    if phase is Phase.WARMUP:
        if not setting.has_warmup:
            raise ValueError(f"setting {setting.index} has no warm-up phase")
        return frozenset({"s", "b"})
    kinds = {"A", "B"}
    if setting.magnitude_enabled:
        kinds.add("m")
    if setting.clip_mode is ClipMode.LEARN:
        kinds |= {"s", "b"}
    return frozenset(kinds)


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float
    rank: int

    @classmethod
    def init(cls, c_out: int, c_in: int, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1 or rank > min(c_in, c_out) / 2:
            raise ValueError(f"rank {rank} must be in [1, min(C_in, C_out)/2]")
        a = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, c_in))
        return cls(Tensor(a, name="A"), Tensor(np.zeros((c_out, rank)), name="B"), alpha, rank)

    def delta(self) -> Tensor:
        return (self.B @ self.A) * self.alpha


class Linear:
    """Plain float linear layer, y = x W^T.  Used for full-precision base training."""

    def __init__(self, weight: np.ndarray, name: str = ""):
        self.weight = Tensor(weight, requires_grad=True, name="W")
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.weight}

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight)


class DLQATLinear:
    """Frozen base ``W0`` plus LoRA update, fake-quantized with group magnitude.

    Wq = m * (s * clip(round((W0 + alpha B A - b) / s)) + b)

    ``m`` only participates when the ablation setting enables it.  In MinMax
    mode ``s`` and ``b`` are rederived from the current effective weight on
    every forward and never optimized.
    """

    def __init__(
        self,
        w0: np.ndarray,
        spec: QuantSpec,
        setting: AblationSetting = DLQAT,
        rank: int = 16,
        alpha: float = 2.0,
        rng: np.random.Generator | None = None,
        activation_bits: int | None = None,
        bias: np.ndarray | None = None,
        name: str = "",
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        w0 = np.asarray(w0, dtype=np.float64)
        c_out, c_in = w0.shape
        spec.group_width(c_in)
        self.W0 = Tensor(w0.copy(), name="W0")
        self.adapter = LoraAdapter.init(c_out, c_in, rank, alpha, rng)
        self.qparams = QuantParams.from_weight(w0, spec)
        self.spec = spec
        self.setting = setting
        self.activation_bits = activation_bits
        self.bias = None if bias is None else Tensor(bias, name="bias")
        self.name = name
        self.exported = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def parameters(self) -> dict[str, Tensor]:
        """Every tensor the layer owns, keyed by kind."""
        q = self.qparams
        return {"W0": self.W0, "A": self.adapter.A, "B": self.adapter.B, "s": q.s, "b": q.b, "m": q.m}

    def trainable(self, phase: Phase) -> dict[str, Tensor]:
        params = self.parameters()
        return {k: params[k] for k in sorted_kinds(trainable_kinds(self.setting, phase))}

    def check_phase(self, phase: Phase) -> None:
        if phase is Phase.WARMUP and not self.setting.has_warmup:
            raise ValueError(f"setting {self.setting.index} has no warm-up phase")
        if phase is Phase.WARMUP and self.qparams.frozen_sb:
            raise ValueError("s and b are already frozen; warm-up is over")

    def effective_weight(self) -> Tensor:
        return self.W0 + self.adapter.delta()

    def _minmax_refresh(self, weight: np.ndarray) -> None:
        lo, hi = minmax_per_group(weight, self.spec)
        s, b = init_scale_bias(lo, hi, self.spec.bits)
        self.qparams.s.data = s
        self.qparams.b.data = b

    def quantized_weight(self) -> Tensor:
        w = self.effective_weight()
        if self.setting.clip_mode is ClipMode.MINMAX and not self.exported:
            self._minmax_refresh(w.data)
        q = self.qparams
        m = q.m if self.setting.magnitude_enabled else None
        return fake_quantize(w, q.s, q.b, m, self.spec.bits)

    def __call__(self, x: Tensor) -> Tensor:
        """Tokens on leading axes: (..., C_in) -> (..., C_out)."""
        if self.activation_bits is not None:
            x = fake_quantize_activation(x, self.activation_bits)
        return F.linear(x, self.quantized_weight(), self.bias)

    def forward(self, x: Tensor, phase: Phase = Phase.MAIN) -> Tensor:
        """Column convention: X of shape (C_in, T) -> Y of shape (C_out, T)."""
        self.check_phase(phase)
        if self.activation_bits is not None:
            x = fake_quantize_activation(x, self.activation_bits)
        y = self.quantized_weight() @ x
        if self.bias is not None:
            y = y + self.bias.reshape(-1, 1)
        return y

    def freeze_sb(self) -> None:
        self.qparams.frozen_sb = True

    def project(self) -> None:
        """Keep learned scales strictly positive after an optimizer step."""
        s = self.qparams.s
        if np.any(s.data < SCALE_FLOOR):
            s.data = np.maximum(s.data, SCALE_FLOOR)

    def finalize_for_export(self) -> None:
        """Pin s, b (and m) at binary32 so packed and in-memory weights agree bitwise."""
        if self.setting.clip_mode is ClipMode.MINMAX and not self.exported:
            self._minmax_refresh(self.effective_weight().data)
        q = self.qparams
        for t in (q.s, q.b, q.m):
            t.data = t.data.astype(np.float32).astype(np.float64)
        self.project()
        q.frozen_sb = True
        self.exported = True
