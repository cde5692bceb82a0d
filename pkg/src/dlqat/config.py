"""INI run configuration: documented keys, defaults, strict validation."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .layer import AblationSetting
from .model import TinyLMConfig
from .quant import QuantSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "off") else int(text)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


# section -> key -> (default, parser, description)
SCHEMA: dict[str, dict[str, tuple[str, object, str]]] = {
    "model": {
        "d_model": ("64", int, "embedding width"),
        "n_layers": ("2", int, "transformer blocks"),
        "n_heads": ("4", int, "attention heads"),
        "ffn_hidden": ("128", int, "gated MLP width"),
        "context_length": ("64", int, "tokens per training window"),
        "pretrain_iters": ("0", int, "full-precision base training before QAT (0 = random base)"),
        "pretrain_lr": ("0.003", float, "learning rate of base training"),
    },
    "quant": {
        "bits": ("4", int, "weight bit-width, 2..8"),
        "granularity": ("per-channel", str, "per-channel or group"),
        "group_size": ("128", int, "columns per group when granularity = group"),
        "activation_bits": ("none", _optional_int, "activation and K/V bit-width, or none"),
    },
    "train": {
        "setting": ("5", int, "ablation setting 1..6 (5 = DL-QAT)"),
        "iters": ("5000", int, "total iterations including warm-up"),
        "warmup_sb_iters": ("1000", int, "iterations training only s, b"),
        "lr": ("0.0002", float, "constant learning rate"),
        "batch_size": ("16", int, "windows per batch"),
        "seed": ("0", int, "seed for LoRA init and batch order"),
        "rank": ("16", int, "LoRA rank"),
        "alpha": ("2.0", float, "LoRA scaling"),
        "ablation_bits": ("3 4", _int_list, "bit-widths swept by the ablation command"),
        "ablation_seeds": ("5", int, "seeds per ablation cell"),
    },
    "data": {
        "corpus": ("corpus.txt", str, "byte corpus path (relative to the config file)"),
        "split": ("0.9", float, "training fraction"),
    },
    "out": {
        "report": ("report.jsonl", str, "line-delimited report path"),
        "checkpoint": ("model.npz", str, "trained model checkpoint"),
        "pack": ("model.dlqt", str, "packed quantized weights"),
    },
}

PATH_KEYS = {("data", "corpus"), ("out", "report"), ("out", "checkpoint"), ("out", "pack")}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    raw: dict[str, dict[str, str]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def quant(self) -> QuantSpec:
        q = self.values["quant"]
        if q["granularity"] == "per-channel":
            return QuantSpec(q["bits"], None)
        return QuantSpec(q["bits"], q["group_size"])

    @property
    def setting(self) -> AblationSetting:
        return AblationSetting.from_index(self.values["train"]["setting"])

    def model_config(self, float_base: bool = False) -> TinyLMConfig:
        m, t = self.values["model"], self.values["train"]
        return TinyLMConfig(
            d_model=m["d_model"],
            n_layers=m["n_layers"],
            n_heads=m["n_heads"],
            ffn_hidden=m["ffn_hidden"],
            context_length=m["context_length"],
            quant=None if float_base else self.quant,
            activation_bits=None if float_base else self.values["quant"]["activation_bits"],
            setting=self.setting,
            rank=t["rank"],
            alpha=t["alpha"],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            batch_size=t["batch_size"],
            learning_rate=t["lr"],
            total_iters=t["iters"],
            warmup_sb_iters=t["warmup_sb_iters"],
            lora_rank=t["rank"],
            lora_alpha=t["alpha"],
            seed=t["seed"],
            setting=self.setting,
            quant=self.quant,
            activation_bits=self.values["quant"]["activation_bits"],
        )


def parse_config(text: str, base_dir: str | os.PathLike = ".", overrides: dict | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    raw: dict[str, dict[str, str]] = {}
    values: dict[str, dict[str, object]] = {}
    for section, keys in SCHEMA.items():
        raw[section], values[section] = {}, {}
        for key, (default, parse, _) in keys.items():
            text_value = parser.get(section, key, fallback=default)
            if overrides and (section, key) in overrides:
                text_value = str(overrides[(section, key)])
            raw[section][key] = text_value
            try:
                value = parse(text_value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {text_value!r}") from exc
            if (section, key) in PATH_KEYS:
                value = os.path.join(base_dir, value)
            values[section][key] = value

    if values["quant"]["granularity"] not in ("per-channel", "group"):
        raise ConfigError("quant.granularity must be 'per-channel' or 'group'")
    cfg = RunConfig(values, raw)
    try:
        model_cfg = cfg.model_config()
        for c_out, c_in in model_cfg.projection_shapes().values():
            cfg.quant.group_width(c_in)
            if values["train"]["rank"] > min(c_out, c_in) / 2:
                raise ValueError(f"rank must not exceed min(C_in, C_out)/2 = {min(c_out, c_in) // 2}")
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)), overrides)


def default_config_text() -> str:
    """A fully commented config listing every key with its default."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (default, _, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)
