"""Save and restore a full model (float parts plus every layer tensor) as .npz."""

from __future__ import annotations

import json
import os

import numpy as np

from .layer import AblationSetting, DLQATLinear
from .model import TinyLM, TinyLMConfig, build_model
from .quant import QuantSpec


def config_to_dict(config: TinyLMConfig) -> dict:
    quant = None
    if config.quant is not None:
        quant = {"bits": config.quant.bits, "group_size": config.quant.group_size}
    return {
        "vocab_size": config.vocab_size,
        "d_model": config.d_model,
        "n_layers": config.n_layers,
        "n_heads": config.n_heads,
        "ffn_hidden": config.ffn_hidden,
        "context_length": config.context_length,
        "quant": quant,
        "activation_bits": config.activation_bits,
        "setting": config.setting.index,
        "rank": config.rank,
        "alpha": config.alpha,
    }


def config_from_dict(d: dict) -> TinyLMConfig:
    d = dict(d)
    quant = d.pop("quant")
    setting = AblationSetting.from_index(d.pop("setting"))
    return TinyLMConfig(
        quant=None if quant is None else QuantSpec(quant["bits"], quant["group_size"]),
        setting=setting,
        **d,
    )


def save_checkpoint(model: TinyLM, path: str | os.PathLike) -> None:
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    flags = {
        name: {"frozen_sb": layer.qparams.frozen_sb, "exported": layer.exported}
        for name, layer in model.linears().items()
        if isinstance(layer, DLQATLinear)
    }
    meta = json.dumps({"config": config_to_dict(model.config), "flags": flags}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def load_checkpoint(path: str | os.PathLike) -> TinyLM:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    config = config_from_dict(meta["config"])
    base = {k: v for k, v in arrays.items() if k.count(".") < 3 and not k.endswith((".W0", ".W"))}
    for name in list(arrays):
        if name.endswith((".W0", ".W")):
            base[name.rsplit(".", 1)[0] + ".weight"] = arrays[name]
    model = build_model(config, base_weights=base)
    params = model.named_parameters()
    for name, t in params.items():
        t.data = np.array(arrays[name], dtype=np.float64)
    for name, layer in model.linears().items():
        if isinstance(layer, DLQATLinear):
            layer.qparams.frozen_sb = meta["flags"][name]["frozen_sb"]
            layer.exported = meta["flags"][name]["exported"]
    return model
