"""Command-line entry point: train, ablation, gradcheck, audit, pack, eval.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 I/O or data
failure, 4 divergence, 5 a verification check failed, 6 malformed pack file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import __version__
from .audit import SHAPE_CATALOG, audit_params
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, default_config_text, load_config
from .data import Corpus, load_corpus, perplexity
from .gradcheck import run_all
from .model import build_model
from .packing import PackFormatError, load_packed_weights, pack_model, packed_size, unpack_model
from .quant import QuantSpec
from .trainer import DivergenceError, pretrain, run_ablation, run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECK_FAILED = 5
EXIT_PACK_FORMAT = 6

REPORT_FORMAT = 1


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides[("train", "seed")] = args.seed
    try:
        return load_config(args.config, overrides)
    except OSError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot read config: {exc}") from exc
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, f"config error: {exc}") from exc


def _corpus(cfg: RunConfig) -> Corpus:
    try:
        return load_corpus(cfg["data"]["corpus"], cfg["data"]["split"])
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_IO, f"data error: {exc}") from exc


def _base_weights(cfg: RunConfig, corpus: Corpus, log=print):
    """Random float base, or one trained at full precision when pretrain_iters > 0."""
    float_cfg = cfg.model_config(float_base=True)
    base = build_model(float_cfg, seed=cfg["train"]["seed"])
    iters = cfg["model"]["pretrain_iters"]
    if iters:
        losses = pretrain(base, corpus, iters, lr=cfg["model"]["pretrain_lr"],
                          batch_size=cfg["train"]["batch_size"], seed=cfg["train"]["seed"])
        log(f"base pretraining: {iters} iters, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return base.base_weights()


def _header(command: str, cfg: RunConfig) -> dict:
    return {"type": "header", "format_version": REPORT_FORMAT, "tool_version": __version__,
            "command": command, "config": cfg.raw}


def _write(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = _config(args)
    report_path = args.out or cfg["out"]["report"]
    corpus = _corpus(cfg)
    base = _base_weights(cfg, corpus, log=(lambda *_: None) if args.json else print)
    model = build_model(cfg.model_config(), seed=cfg["train"]["seed"], base_weights=base)
    try:
        fh = open(report_path, "w", encoding="utf-8")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write report: {exc}") from exc
    with fh:
        _write(fh, _header("train", cfg))
        try:
            report = run_training(model, corpus, cfg.train_config(), log=lambda r: _write(fh, {"type": "iter", **r}))
        except DivergenceError as exc:
            _write(fh, {"type": "error", "iteration": exc.iteration, "message": str(exc)})
            raise CommandError(EXIT_DIVERGED, str(exc)) from exc
        summary = report.summary()
        _write(fh, {"type": "summary", **summary})
    try:
        save_checkpoint(model, cfg["out"]["checkpoint"])
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write checkpoint: {exc}") from exc
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"setting {cfg.setting.index}, {cfg.quant.bits}-bit, {summary['iters']} iterations")
        print(f"eval perplexity {summary['initial_perplexity']:.3f} -> {summary['final_perplexity']:.3f}")
        print(f"report: {report_path}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _config(args)
    report_path = args.out or cfg["out"]["report"]
    corpus = _corpus(cfg)
    base = _base_weights(cfg, corpus, log=(lambda *_: None) if args.json else print)
    model_cfg = cfg.model_config()

    def factory(setting, quant, seed):
        return build_model(replace(model_cfg, quant=quant, setting=setting), seed=seed, base_weights=base)

    seeds = tuple(range(cfg["train"]["seed"], cfg["train"]["seed"] + cfg["train"]["ablation_seeds"]))
    try:
        fh = open(report_path, "w", encoding="utf-8")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write report: {exc}") from exc
    with fh:
        _write(fh, _header("ablation", cfg))
        try:
            result = run_ablation(factory, corpus, cfg.train_config(), cfg["train"]["ablation_bits"], seeds,
                                  log=lambda r: _write(fh, {"type": "run", **r}))
        except DivergenceError as exc:
            _write(fh, {"type": "error", "iteration": exc.iteration, "message": str(exc)})
            raise CommandError(EXIT_DIVERGED, str(exc)) from exc
        for row in result.rows:
            _write(fh, {"type": "row", **row.as_dict()})
        for bits in result.bit_widths:
            _write(fh, {"type": "ordering", "bits": bits, **result.ordering(bits)})
    if args.json:
        print(json.dumps([row.as_dict() for row in result.rows], sort_keys=True))
    else:
        print(result.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed or 0)
    if args.json:
        print(json.dumps([{"name": r.name, "kind": r.kind, "max_error": r.max_error,
                           "tolerance": r.tolerance, "passed": r.passed} for r in results]))
    else:
        for r in results:
            print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_audit(args) -> int:
    try:
        spec = QuantSpec(args.bits, args.group_size if args.granularity == "group" else None)
        audit = audit_params(args.arch, spec, args.rank)
    except KeyError as exc:
        raise CommandError(EXIT_CONFIG, str(exc.args[0])) from exc
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    row = {"arch": args.arch, "bits": args.bits, "granularity": args.granularity,
           "group_size": spec.group_size, "rank": args.rank, **audit.as_dict(),
           "below_1pct": audit.fraction_of_total < 0.01}
    if args.json:
        print(json.dumps(row, sort_keys=True))
    else:
        print(f"{args.arch}  {args.granularity}{'' if spec.per_channel else f' g{spec.group_size}'}  r={args.rank}")
        print(f"  quantization groups   {audit.groups:>14,}")
        print(f"  s,b parameters        {audit.count_sb:>14,}  ({audit.count_sb / 1e6:.1f}M)")
        print(f"  m,A,B parameters      {audit.count_mAB:>14,}  ({audit.count_mAB / 1e6:.1f}M)")
        print(f"  total parameters      {audit.total:>14,}")
        print(f"  trainable fraction    {audit.fraction_of_total:>14.3%}  (<1%: {row['below_1pct']})")
    return EXIT_OK


def cmd_pack(args) -> int:
    cfg = _config(args)
    ckpt = cfg["out"]["checkpoint"]
    pack_path = args.out or cfg["out"]["pack"]
    try:
        model = load_checkpoint(ckpt)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read checkpoint: {exc}") from exc
    raw = pack_model(model)
    try:
        with open(pack_path, "wb") as fh:
            fh.write(raw)
        # packing pins metadata at binary32; keep the checkpoint in sync
        save_checkpoint(model, ckpt)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write pack: {exc}") from exc
    grid = sum(packed_size(l.shape[0] * l.shape[1], model.config.quant.bits) for l in model.linears().values())
    info = {"path": pack_path, "bytes": len(raw), "grid_bytes": grid, "bits": model.config.quant.bits}
    if args.json:
        print(json.dumps(info, sort_keys=True))
    else:
        print(f"wrote {pack_path}: {len(raw)} bytes ({grid} bytes of {info['bits']}-bit grids)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    corpus = _corpus(cfg)
    try:
        model = load_checkpoint(cfg["out"]["checkpoint"])
        if args.pack:
            with open(args.pack, "rb") as fh:
                load_packed_weights(model, unpack_model(fh.read()))
    except PackFormatError as exc:
        raise CommandError(EXIT_PACK_FORMAT, f"pack error: {exc}") from exc
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot read model: {exc}") from exc
    ppl = perplexity(model, corpus.eval, model.config.context_length)
    if args.json:
        print(json.dumps({"perplexity": ppl, "source": args.pack or cfg["out"]["checkpoint"]}))
    else:
        print(f"perplexity {ppl!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlqat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="override the output path")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    common(sub.add_parser("train", help="two-phase DL-QAT training")).set_defaults(func=cmd_train)
    common(sub.add_parser("ablation", help="six-setting ablation sweep")).set_defaults(func=cmd_ablation)
    common(sub.add_parser("gradcheck", help="verify gradients"), config=False).set_defaults(func=cmd_gradcheck)

    audit = common(sub.add_parser("audit", help="count trainable parameters"), config=False)
    audit.add_argument("--arch", required=True, help=f"one of {', '.join(SHAPE_CATALOG)}")
    audit.add_argument("--bits", type=int, default=4)
    audit.add_argument("--granularity", choices=("per-channel", "group"), default="per-channel")
    audit.add_argument("--group-size", type=int, default=128)
    audit.add_argument("--rank", type=int, default=16)
    audit.set_defaults(func=cmd_audit)

    common(sub.add_parser("pack", help="write the packed quantized model")).set_defaults(func=cmd_pack)
    ev = common(sub.add_parser("eval", help="perplexity on the eval split"))
    ev.add_argument("--pack", default=None, help="evaluate through this pack file")
    ev.set_defaults(func=cmd_eval)

    cfg = sub.add_parser("config", help="print a default config file")
    cfg.set_defaults(func=lambda args: print(default_config_text()) or EXIT_OK)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"dlqat {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
