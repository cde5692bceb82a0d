"""Two-phase DL-QAT training and the six-setting ablation harness.

Phase one (warm-up) optimizes only the quantizer scales and offsets; for the
learn-then-fix settings they are then frozen.  Phase two optimizes the main
set of the ablation setting.  Optimizer moments are discarded at the boundary.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import Corpus, mean_nll, sample_batch
from .functional import cross_entropy
from .layer import DLQAT, AblationSetting, ClipMode, DLQATLinear, Phase, trainable_kinds
from .model import TinyLM
from .optim import OptimizerState, adamw_step
from .quant import QuantSpec
from .tensor import NonFiniteError


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite loss at iteration {iteration}" + (f": {detail}" if detail else ""))
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 2e-4
    total_iters: int = 5000
    warmup_sb_iters: int = 1000
    lora_rank: int = 16
    lora_alpha: float = 2.0
    seed: int = 0
    setting: AblationSetting = DLQAT
    quant: QuantSpec = field(default_factory=QuantSpec)
    activation_bits: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.total_iters < 1:
            raise ValueError("total_iters must be at least 1")
        if self.warmup_sb_iters < 0:
            raise ValueError("warmup_sb_iters must be non-negative")
        if self.setting.has_warmup and self.warmup_sb_iters >= self.total_iters:
            raise ValueError("warmup_sb_iters must be below total_iters")

    def phases(self) -> list[tuple[Phase, int]]:
        if not self.setting.has_warmup:
            return [(Phase.MAIN, self.total_iters)]
        return [(Phase.WARMUP, self.warmup_sb_iters), (Phase.MAIN, self.total_iters - self.warmup_sb_iters)]


@dataclass
class TrainingReport:
    records: list[dict]
    initial_eval_loss: float | None
    final_eval_loss: float | None
    elapsed_s: float
    final_params: dict[str, np.ndarray]
    changes: list[frozenset[str]] | None = None
    sb_fingerprint_after_warmup: str | None = None
    sb_fingerprint_final: str | None = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    @property
    def initial_perplexity(self) -> float | None:
        return None if self.initial_eval_loss is None else float(np.exp(self.initial_eval_loss))

    @property
    def final_perplexity(self) -> float | None:
        return None if self.final_eval_loss is None else float(np.exp(self.final_eval_loss))

    def summary(self) -> dict:
        return {
            "iters": len(self.records),
            "final_train_loss": self.records[-1]["loss"] if self.records else None,
            "initial_eval_loss": self.initial_eval_loss,
            "final_eval_loss": self.final_eval_loss,
            "initial_perplexity": self.initial_perplexity,
            "final_perplexity": self.final_perplexity,
            "sb_fingerprint_after_warmup": self.sb_fingerprint_after_warmup,
            "sb_fingerprint_final": self.sb_fingerprint_final,
            "elapsed_s": self.elapsed_s,
        }


def quant_layers(model: TinyLM) -> dict[str, DLQATLinear]:
    layers = {n: l for n, l in model.linears().items() if isinstance(l, DLQATLinear)}
    if not layers:
        raise ValueError("model has no DL-QAT layers")
    return layers


def phase_parameter_names(model: TinyLM, phase: Phase) -> list[str]:
    names = []
    for lname, layer in quant_layers(model).items():
        names.extend(f"{lname}.{kind}" for kind in layer.trainable(phase))
    return names


def tracked_kinds(setting: AblationSetting) -> tuple[str, ...]:
    """Kinds whose bytes are stable unless optimized; MinMax s, b are rederived every forward."""
    if setting.clip_mode is ClipMode.MINMAX:
        return ("W0", "m", "A", "B")
    return ("W0", "s", "b", "m", "A", "B")


def sb_fingerprint(model: TinyLM) -> str:
    h = hashlib.sha256()
    for name, layer in quant_layers(model).items():
        h.update(name.encode())
        h.update(layer.qparams.s.data.tobytes())
        h.update(layer.qparams.b.data.tobytes())
    return h.hexdigest()


def _grad_norms(params: dict[str, "object"]) -> dict[str, float]:
    sq: dict[str, float] = {}
    for name, p in params.items():
        kind = name.rsplit(".", 1)[-1]
        sq[kind] = sq.get(kind, 0.0) + float(np.sum(p.grad * p.grad))
    return {k: float(np.sqrt(v)) for k, v in sorted(sq.items())}


def _step(model, params, state, batch, lr, iteration):
    x, y = batch
    try:
        loss = cross_entropy(model(x), y)
    except NonFiniteError as exc:
        raise DivergenceError(iteration, str(exc)) from exc
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(iteration)
    loss.backward()
    norms = _grad_norms(params)
    adamw_step(params, state, lr)
    for t in params.values():
        t.grad = None
    return value, norms


def run_training(
    model: TinyLM,
    data: Corpus,
    config: TrainConfig,
    *,
    record_changes: bool = False,
    evaluate: bool = True,
    log: Callable[[dict], None] | None = None,
) -> TrainingReport:
    """Warm-up on {s, b} (when the setting has one), then the main phase."""
    layers = quant_layers(model)
    if model.config.setting is not config.setting:
        raise ValueError("model and training config disagree on the ablation setting")
    if data.train.size <= model.config.context_length:
        raise ValueError("training split is shorter than one context window")
    rng = np.random.default_rng(config.seed)
    ctx = model.config.context_length
    tracked = tracked_kinds(config.setting)
    records: list[dict] = []
    changes: list[frozenset[str]] | None = [] if record_changes else None
    fp_warm = None

    start = time.perf_counter()
    initial = mean_nll(model, data.eval, ctx) if evaluate else None
    iteration = 0
    all_params = model.named_parameters()
    for phase, n_iters in config.phases():
        names = phase_parameter_names(model, phase)
        model.set_trainable(names)
        params = {n: all_params[n] for n in names}
        state = OptimizerState()
        for _ in range(n_iters):
            iteration += 1
            if record_changes:
                before = {
                    f"{ln}.{k}": layer.parameters()[k].data.copy()
                    for ln, layer in layers.items()
                    for k in tracked
                }
            batch = sample_batch(data.train, config.batch_size, ctx, rng)
            loss, norms = _step(model, params, state, batch, config.learning_rate, iteration)
            for layer in layers.values():
                layer.project()
            record = {"iter": iteration, "phase": phase.value, "loss": loss, "grad_norms": norms}
            records.append(record)
            if log is not None:
                log(record)
            if record_changes:
                changed = {
                    name.rsplit(".", 1)[-1]
                    for name, old in before.items()
                    if not np.array_equal(old, all_params[name].data)
                }
                changes.append(frozenset(changed))
        if phase is Phase.WARMUP and config.setting.clip_mode is ClipMode.LEARN_THEN_FIX:
            for layer in layers.values():
                layer.freeze_sb()
            fp_warm = sb_fingerprint(model)
    model.set_trainable(())
    final = mean_nll(model, data.eval, ctx) if evaluate else None
    elapsed = time.perf_counter() - start

    final_params = {}
    for ln, layer in layers.items():
        for k, t in layer.parameters().items():
            final_params[f"{ln}.{k}"] = t.data.copy()
    return TrainingReport(
        records=records,
        initial_eval_loss=initial,
        final_eval_loss=final,
        elapsed_s=elapsed,
        final_params=final_params,
        changes=changes,
        sb_fingerprint_after_warmup=fp_warm,
        sb_fingerprint_final=sb_fingerprint(model) if fp_warm is not None else None,
    )


def pretrain(
    model: TinyLM,
    data: Corpus,
    iters: int,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> list[float]:
    """Full-precision training of every weight of a float model; returns the loss trace."""
    if model.quantized:
        raise ValueError("pretrain expects a model built without quantization")
    rng = np.random.default_rng([seed, 7])
    params = model.named_parameters()
    model.set_trainable(params)
    state = OptimizerState()
    losses = []
    for i in range(iters):
        batch = sample_batch(data.train, batch_size, model.config.context_length, rng)
        loss, _ = _step(model, params, state, batch, lr, i + 1)
        losses.append(loss)
    model.set_trainable(())
    return losses


# -- ablation -------------------------------------------------------------


ModelFactory = Callable[[AblationSetting, QuantSpec, int], TinyLM]


@dataclass
class AblationRow:
    setting: AblationSetting
    bits: int
    final_eval_losses: list[float]
    sb_frozen: bool | None

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.final_eval_losses))

    @property
    def std_loss(self) -> float:
        return float(np.std(self.final_eval_losses, ddof=1)) if len(self.final_eval_losses) > 1 else 0.0

    @property
    def perplexities(self) -> np.ndarray:
        return np.exp(self.final_eval_losses)

    @property
    def mean_ppl(self) -> float:
        return float(np.mean(self.perplexities))

    @property
    def std_ppl(self) -> float:
        return float(np.std(self.perplexities, ddof=1)) if len(self.final_eval_losses) > 1 else 0.0

    def as_dict(self) -> dict:
        return {
            **self.setting.label(),
            "bits": self.bits,
            "seeds": len(self.final_eval_losses),
            "final_eval_losses": self.final_eval_losses,
            "mean_loss": self.mean_loss,
            "std_loss": self.std_loss,
            "mean_ppl": self.mean_ppl,
            "std_ppl": self.std_ppl,
            "sb_frozen": self.sb_frozen,
        }


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def row(self, setting: AblationSetting, bits: int) -> AblationRow:
        for r in self.rows:
            if r.setting is setting and r.bits == bits:
                return r
        raise KeyError((setting, bits))

    @property
    def bit_widths(self) -> list[int]:
        return sorted({r.bits for r in self.rows})

    def ordering(self, bits: int) -> dict[str, bool]:
        """Does setting 5 reach a mean final loss no worse than settings 1 and 2?"""
        s5 = self.row(AblationSetting.S5, bits).mean_loss
        return {
            "S5<=S1": s5 <= self.row(AblationSetting.S1, bits).mean_loss,
            "S5<=S2": s5 <= self.row(AblationSetting.S2, bits).mean_loss,
        }

    def table(self) -> str:
        lines = []
        for bits in self.bit_widths:
            lines.append(f"{bits}-bit")
            lines.append(f"{'Setting':<8}{'m':<7}{'Clipping bounds':<17}{'Learnable params':<20}"
                         f"{'eval loss':>18}{'ppl':>20}")
            for setting in AblationSetting:
                r = self.row(setting, bits)
                lab = setting.label()
                lines.append(
                    f"{lab['setting']:<8}{lab['m']:<7}{lab['clipping']:<17}{lab['learnable']:<20}"
                    f"{r.mean_loss:>10.4f} ± {r.std_loss:<6.4f}{r.mean_ppl:>12.3f} ± {r.std_ppl:<6.3f}"
                )
            flags = self.ordering(bits)
            verdict = ", ".join(f"{k}: {'ok' if v else 'DEVIATES'}" for k, v in flags.items())
            lines.append(f"ordering: {verdict}")
            lines.append("")
        return "\n".join(lines)


def run_ablation(
    model_factory: ModelFactory,
    data: Corpus,
    base_config: TrainConfig,
    bit_widths=(3, 4),
    seeds=(0, 1, 2, 3, 4),
    log: Callable[[dict], None] | None = None,
) -> AblationReport:
    """Train every setting at every bit-width for every seed, sequentially."""
    rows = []
    for bits in bit_widths:
        quant = replace(base_config.quant, bits=bits)
        for setting in AblationSetting:
            losses = []
            frozen_ok = [] if setting.clip_mode is ClipMode.LEARN_THEN_FIX else None
            for seed in seeds:
                config = replace(base_config, setting=setting, quant=quant, seed=seed)
                model = model_factory(setting, quant, seed)
                report = run_training(model, data, config)
                losses.append(report.final_eval_loss)
                if frozen_ok is not None:
                    frozen_ok.append(report.sb_fingerprint_after_warmup == report.sb_fingerprint_final)
                if log is not None:
                    log({"bits": bits, "setting": setting.index, "seed": seed, **report.summary()})
            rows.append(AblationRow(setting, bits, losses, None if frozen_ok is None else all(frozen_ok)))
    return AblationReport(rows)
