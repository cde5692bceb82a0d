"""A small LLaMA-style language model whose projections are DL-QAT layers."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import functional as F
from .layer import DLQAT, AblationSetting, DLQATLinear, Linear
from .quant import QuantSpec, fake_quantize_activation
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 128
    context_length: int = 64
    quant: QuantSpec | None = None
    activation_bits: int | None = None
    setting: AblationSetting = DLQAT
    rank: int = 16
    alpha: float = 2.0

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "ffn_hidden", "context_length"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.activation_bits is not None and not 2 <= self.activation_bits <= 8:
            raise ValueError("activation_bits must be in [2, 8]")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def projection_shapes(self) -> dict[str, tuple[int, int]]:
        """(C_out, C_in) per projection kind."""
        d, f = self.d_model, self.ffn_hidden
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "gate": (f, d), "up": (f, d), "down": (d, f)}


class Block:
    def __init__(self, layers: dict, attn_norm: Tensor, ffn_norm: Tensor):
        self.layers = layers
        self.attn_norm = attn_norm
        self.ffn_norm = ffn_norm


class TinyLM:
    """Pre-norm transformer: RMSNorm, rotary attention, SiLU-gated MLP.

    Embedding, norms and output head stay in float and are only trained when
    the model is built without quantization.
    """

    def __init__(self, config: TinyLMConfig, embed, blocks: list[Block], final_norm, head):
        self.config = config
        self.embed = embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head
        self._cos, self._sin = F.rotary_tables(config.context_length, config.head_dim)

    @property
    def quantized(self) -> bool:
        return self.config.quant is not None

    def linears(self) -> dict[str, Linear | DLQATLinear]:
        return {
            f"layers.{i}.{kind}": layer
            for i, block in enumerate(self.blocks)
            for kind, layer in block.layers.items()
        }

    def dense_parameters(self) -> dict[str, Tensor]:
        """Embedding, norm gains and head."""
        params = {"embed": self.embed, "final_norm": self.final_norm, "head": self.head}
        for i, block in enumerate(self.blocks):
            params[f"layers.{i}.attn_norm"] = block.attn_norm
            params[f"layers.{i}.ffn_norm"] = block.ffn_norm
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        params = dict(self.dense_parameters())
        for name, layer in self.linears().items():
            for kind, t in layer.parameters().items():
                params[f"{name}.{kind}"] = t
        return params

    def _attention(self, block: Block, h: Tensor) -> Tensor:
        cfg = self.config
        bsz, t, _ = h.shape
        q = block.layers["q"](h)
        k = block.layers["k"](h)
        v = block.layers["v"](h)
        if cfg.activation_bits is not None:
            k = fake_quantize_activation(k, cfg.activation_bits)
            v = fake_quantize_activation(v, cfg.activation_bits)

        def heads(x):
            return x.reshape(bsz, t, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)

        q = F.rope(heads(q), self._cos, self._sin)
        k = F.rope(heads(k), self._cos, self._sin)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(cfg.head_dim))
        mask = np.tril(np.ones((t, t), dtype=bool))
        att = F.softmax(scores, axis=-1, mask=mask)
        out = (att @ heads(v)).transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        return block.layers["o"](out)

    def __call__(self, ids: np.ndarray) -> Tensor:
        """Token ids (B, T) -> logits (B, T, vocab)."""
        ids = np.atleast_2d(np.asarray(ids))
        if ids.shape[1] > self.config.context_length:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds context {self.config.context_length}")
        x = F.embedding(self.embed, ids)
        for block in self.blocks:
            x = x + self._attention(block, F.rmsnorm(x, block.attn_norm))
            h = F.rmsnorm(x, block.ffn_norm)
            layers = block.layers
            x = x + layers["down"](F.silu(layers["gate"](h)) * layers["up"](h))
        x = F.rmsnorm(x, self.final_norm)
        return F.linear(x, self.head)

    def set_trainable(self, names) -> None:
        """Flag exactly ``names`` (keys of ``named_parameters``) as requiring grad."""
        names = set(names)
        for name, t in self.named_parameters().items():
            t.requires_grad = name in names
            t.grad = None

    def base_weights(self) -> dict[str, np.ndarray]:
        """Float weights (dense parts plus W / W0 of every projection)."""
        out = {name: t.data.copy() for name, t in self.dense_parameters().items()}
        for name, layer in self.linears().items():
            w = layer.weight if isinstance(layer, Linear) else layer.W0
            out[f"{name}.weight"] = w.data.copy()
        return out


def random_base_weights(config: TinyLMConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, v = config.d_model, config.vocab_size
    weights = {
        "embed": rng.normal(0.0, 1.0, size=(v, d)),
        "final_norm": np.ones(d),
        "head": rng.normal(0.0, 1.0 / np.sqrt(d), size=(v, d)),
    }
    for i in range(config.n_layers):
        weights[f"layers.{i}.attn_norm"] = np.ones(d)
        weights[f"layers.{i}.ffn_norm"] = np.ones(d)
        for kind, (c_out, c_in) in config.projection_shapes().items():
            std = 1.0 / np.sqrt(c_in)
            if kind in ("o", "down"):
                std /= np.sqrt(2 * config.n_layers)
            weights[f"layers.{i}.{kind}.weight"] = rng.normal(0.0, std, size=(c_out, c_in))
    return weights


def build_model(
    config: TinyLMConfig, seed: int = 0, base_weights: dict[str, np.ndarray] | None = None
) -> TinyLM:
    """Assemble a model.  Without ``config.quant`` every projection is a float
    :class:`Linear`; otherwise each is a :class:`DLQATLinear` over ``base_weights``.

    ``seed`` drives both the random base (when none is given) and the LoRA
    ``A`` initialization.
    """
    if base_weights is None:
        base_weights = random_base_weights(config, seed)
    rng = np.random.default_rng([seed, 1])
    shapes = config.projection_shapes()

    def dense(name):
        return Tensor(np.array(base_weights[name], dtype=np.float64), name=name)

    blocks = []
    for i in range(config.n_layers):
        layers = {}
        for kind in PROJECTIONS:
            name = f"layers.{i}.{kind}"
            w = np.asarray(base_weights[f"{name}.weight"], dtype=np.float64)
            if w.shape != shapes[kind]:
                raise ValueError(f"{name} has shape {w.shape}, expected {shapes[kind]}")
            if config.quant is None:
                layers[kind] = Linear(w.copy(), name=name)
            else:
                layers[kind] = DLQATLinear(
                    w,
                    config.quant,
                    config.setting,
                    rank=config.rank,
                    alpha=config.alpha,
                    rng=rng,
                    activation_bits=config.activation_bits,
                    name=name,
                )
        blocks.append(Block(layers, dense(f"layers.{i}.attn_norm"), dense(f"layers.{i}.ffn_norm")))
    return TinyLM(config, dense("embed"), blocks, dense("final_norm"), dense("head"))


def quantize_model(
    model: TinyLM,
    quant: QuantSpec,
    setting: AblationSetting = DLQAT,
    seed: int = 0,
    **overrides,
) -> TinyLM:
    """Wrap the float weights of ``model`` as frozen bases of DL-QAT layers."""
    config = replace(model.config, quant=quant, setting=setting, **overrides)
    return build_model(config, seed=seed, base_weights=model.base_weights())
