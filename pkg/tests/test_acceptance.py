"""Acceptance criteria, one test each.

Every test prints a line ``ACCEPT [PASS|FAIL] <n> <name>: <detail>`` (through the
terminal reporter, so no ``-s`` is needed) and asserts the same verdict.  Tolerances and sizes
are pinned here.  Criteria 9 and 10 train real models and are marked slow.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from dlqat import reference
from dlqat.audit import audit_params
from dlqat.data import corpus_from_bytes, synthetic_text
from dlqat.gradcheck import MAGNITUDE_TOL, SMOOTH_TOL, run_all
from dlqat.layer import AblationSetting, Phase, trainable_kinds
from dlqat.model import TinyLMConfig, build_model
from dlqat.packing import decode, load_packed_weights, pack_model, packed_linear_forward, unpack_model
from dlqat.quant import QuantSpec, dequantize, fake_quantize, init_scale_bias, minmax_per_group, quantize_ints
from dlqat.tensor import Tensor
from dlqat.trainer import TrainConfig, pretrain, run_ablation, run_training

S = AblationSetting


_terminal = None


@pytest.fixture(autouse=True)
def _grab_terminal(pytestconfig):
    global _terminal
    _terminal = pytestconfig.pluginmanager.get_plugin("terminalreporter")


def emit(text: str) -> None:
    # through the terminal reporter so the lines show even when output is captured
    if _terminal is None:
        print(text)
    else:
        _terminal.write_line("")
        _terminal.write_line(text)


def report(n: int, name: str, ok: bool, detail: str, elapsed: float | None = None) -> None:
    timing = "" if elapsed is None else f" [{elapsed:.1f}s]"
    emit(f"ACCEPT [{'PASS' if ok else 'FAIL'}] {n:>2} {name}: {detail}{timing}")


def _random_case(rng):
    bits = int(rng.integers(2, 9))
    c_out = int(rng.integers(1, 9))
    g = int(rng.integers(1, 9))
    c_in = g * int(rng.integers(1, 5))
    spec = QuantSpec(bits, None) if rng.random() < 0.5 else QuantSpec(bits, g)
    w = rng.normal(size=(c_out, c_in)) * rng.uniform(0.05, 5.0)
    lo, hi = minmax_per_group(w, spec)
    s, b = init_scale_bias(lo, hi, bits)
    shape = s.shape
    s = s * rng.uniform(0.5, 1.3, size=shape)
    b = b + rng.normal(scale=0.1, size=shape) * s
    m = rng.uniform(0.5, 1.5, size=shape)
    return w, s, b, m, bits, spec


def test_criterion_01_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n_cases, mismatches, granularities, widths = 1000, 0, set(), set()
    for _ in range(n_cases):
        w, s, b, m, bits, spec = _random_case(rng)
        granularities.add(spec.per_channel)
        widths.add(bits)
        out = fake_quantize(Tensor(w), Tensor(s), Tensor(b), Tensor(m), bits).data
        ref = np.array(reference.fake_quantize_matrix(w.tolist(), s.tolist(), b.tolist(), m.tolist(), bits))
        mismatches += out.tobytes() != ref.tobytes()
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and granularities == {True, False} and widths == set(range(2, 9)) and elapsed < 60
    report(1, "quantizer oracle equivalence", ok,
           f"{n_cases} cases, n in {sorted(widths)}, both granularities, {mismatches} bitwise mismatches", elapsed)
    assert ok


def test_criterion_02_grid_round_trip():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    failures = checked = 0
    for bits in range(2, 9):
        grid = np.arange(-(2 ** (bits - 1)), 2 ** (bits - 1), dtype=np.float64)[None, :]
        for _ in range(200):
            s = np.array([[10.0 ** rng.uniform(-4, 2)]])
            b = np.array([[rng.normal(scale=10.0)]])
            back = quantize_ints(dequantize(grid, s, b, np.ones((1, 1))), s, b, bits)
            failures += not np.array_equal(back, grid)
            checked += grid.size
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    report(2, "grid round trip", ok, f"{checked} grid values over n=2..8, {failures} failing (s,b) draws", elapsed)
    assert ok


def test_criterion_03_initialization_identity():
    start = time.perf_counter()
    s, b = init_scale_bias(-1.0, 1.0, 4)
    exact = abs(float(s) - 2 / 15) < 1e-15 and abs(float(b) - 1 / 15) < 1e-15
    rng = np.random.default_rng(3)
    worst = 0.0
    for bits in range(2, 9):
        lo = rng.normal(scale=5.0, size=500)
        hi = lo + rng.uniform(1e-3, 10.0, size=500)
        s_, b_ = init_scale_bias(lo, hi, bits)
        worst = max(worst, np.max(np.abs(s_ * -(2 ** (bits - 1)) + b_ - lo)),
                    np.max(np.abs(s_ * (2 ** (bits - 1) - 1) + b_ - hi)))
    elapsed = time.perf_counter() - start
    ok = exact and worst <= 1e-6 and elapsed < 1
    report(3, "initialization identity", ok,
           f"(-1,1,n=4) -> s={float(s):.6f}, b={float(b):.6f}; endpoint error {worst:.1e} (tol 1e-6)", elapsed)
    assert ok


def test_criterion_04_gradient_suite():
    start = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - start
    fd = [r for r in results if r.kind == "fd"]
    mag = [r for r in results if r.kind == "fd-exact"]
    ste = [r for r in results if r.kind == "closed-form"]
    ok = (all(r.max_error <= SMOOTH_TOL for r in fd) and all(r.max_error <= MAGNITUDE_TOL for r in mag)
          and all(r.max_error == 0.0 for r in ste) and len(ste) == 4 and elapsed < 300)
    worst = max(fd, key=lambda r: r.max_error)
    report(4, "gradient suite", ok,
           f"{len(fd)} smooth ops, worst {worst.name} {worst.max_error:.1e} (tol 1e-4); "
           f"m {mag[0].max_error:.1e} (tol 1e-5); STE W/s/b/m max diff {max(r.max_error for r in ste):.0e} (exact)",
           elapsed)
    assert ok


def test_criterion_05_schedule_and_freeze():
    start = time.perf_counter()
    corpus = corpus_from_bytes(synthetic_text(20_000, seed=3))
    base_cfg = TinyLMConfig(d_model=32, n_layers=2, n_heads=4, ffn_hidden=64, context_length=16,
                            quant=QuantSpec(4), rank=4)
    warmup, total = 100, 160
    model = build_model(base_cfg, seed=0)
    fresh_w0 = {n: l.W0.data.tobytes() for n, l in model.linears().items()}
    tc = TrainConfig(batch_size=4, learning_rate=2e-3, total_iters=total, warmup_sb_iters=warmup, quant=base_cfg.quant)
    rep = run_training(model, corpus, tc, record_changes=True, evaluate=False)
    warm_ok = all(ch == {"s", "b"} for ch in rep.changes[:warmup])
    # B = 0 at init makes A's gradient exactly zero on the first main step
    first_ok = rep.changes[warmup] == {"m", "B"}
    main_ok = all(ch == {"m", "A", "B"} for ch in rep.changes[warmup + 1:])
    frozen_ok = rep.sb_fingerprint_after_warmup == rep.sb_fingerprint_final
    w0_ok = all(model.linears()[n].W0.data.tobytes() == v for n, v in fresh_w0.items())

    for setting in S:
        cfg = replace(base_cfg, setting=setting)
        m = build_model(cfg, seed=1)
        before = {n: l.W0.data.tobytes() for n, l in m.linears().items()}
        r = run_training(m, corpus, replace(tc, setting=setting, total_iters=12, warmup_sb_iters=4),
                         record_changes=True, evaluate=False)
        w0_ok &= all(m.linears()[n].W0.data.tobytes() == v for n, v in before.items())
        w0_ok &= all("W0" not in ch for ch in r.changes)
    elapsed = time.perf_counter() - start
    ok = warm_ok and first_ok and main_ok and frozen_ok and w0_ok and elapsed < 300
    report(5, "schedule/freeze properties", ok,
           f"S5 {warmup}+{total - warmup} iters: warm-up exactly {{s,b}} {warm_ok}; first main step {{m,B}} "
           f"(A grad is 0 since B=0) {first_ok}; then exactly {{m,A,B}} {main_ok}; s,b frozen {frozen_ok}; "
           f"W0 unchanged in all six settings {w0_ok}", elapsed)
    assert ok


def test_criterion_06_table_structure():
    start = time.perf_counter()
    table = {
        S.S1: (None, {"A", "B"}),
        S.S2: ({"s", "b"}, {"A", "B"}),
        S.S3: ({"s", "b"}, {"s", "b", "A", "B"}),
        S.S4: (None, {"m", "A", "B"}),
        S.S5: ({"s", "b"}, {"m", "A", "B"}),
        S.S6: ({"s", "b"}, {"m", "s", "b", "A", "B"}),
    }
    mismatches = []
    for setting, (warm, main) in table.items():
        if trainable_kinds(setting, Phase.MAIN) != main:
            mismatches.append(f"S{setting.index} main")
        if warm is None:
            if setting.has_warmup:
                mismatches.append(f"S{setting.index} warm-up")
        elif trainable_kinds(setting, Phase.WARMUP) != warm:
            mismatches.append(f"S{setting.index} warm-up")
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 1
    report(6, "ablation table structure", ok, f"6 settings x 2 phases, mismatches: {mismatches or 'none'}", elapsed)
    assert ok


def test_criterion_07_parameter_audit():
    start = time.perf_counter()
    a7 = audit_params("llama-7b", QuantSpec(4), 16)
    a13 = audit_params("llama-13b", QuantSpec(4), 16)
    e7 = abs(a7.count_mAB - 41e6) / 41e6
    e13 = abs(a13.count_mAB - 65e6) / 65e6
    elapsed = time.perf_counter() - start
    ok = e7 <= 0.05 and e13 <= 0.05 and a7.fraction_of_total < 0.01 and elapsed < 1
    report(7, "parameter audit", ok,
           f"7B m+A+B {a7.count_mAB / 1e6:.1f}M vs 41M ({e7:.1%}); 13B {a13.count_mAB / 1e6:.1f}M vs 65M "
           f"({e13:.1%}); tol 5%; 7B fraction {a7.fraction_of_total:.2%} (< 1%)", elapsed)
    assert ok


def test_criterion_08_pack_round_trip():
    start = time.perf_counter()
    failures = []
    rng = np.random.default_rng(8)
    for bits in (3, 4):
        for group in (None, 8):
            cfg = TinyLMConfig(d_model=32, n_layers=2, n_heads=4, ffn_hidden=64, context_length=16, rank=4,
                               quant=QuantSpec(bits, group))
            model = build_model(cfg, seed=bits)
            for layer in model.linears().values():
                layer.adapter.B.data = rng.normal(scale=0.01, size=layer.adapter.B.shape)
                layer.qparams.m.data = rng.uniform(0.9, 1.1, size=layer.qparams.m.shape)
            raw = pack_model(model)
            pack = unpack_model(raw)
            again = decode(raw)
            for name, layer in model.linears().items():
                q = layer.qparams
                grid = quantize_ints(layer.effective_weight().data, q.s.data, q.b.data, bits)
                lossless = (np.array_equal(pack[name].grid, grid) and np.array_equal(again[name].grid, grid)
                            and all(x.tobytes() == y.data.tobytes()
                                    for x, y in ((pack[name].s, q.s), (pack[name].b, q.b), (pack[name].m, q.m))))
                x = rng.normal(size=(32, layer.shape[1]))
                same = packed_linear_forward(pack, name, x).data.tobytes() == layer(Tensor(x)).data.tobytes()
                if not (lossless and same):
                    failures.append(f"{bits}-bit/{group}/{name}")
            ids = rng.integers(0, 256, size=(2, 16))
            before = model(ids).data
            load_packed_weights(model, pack)
            if model(ids).data.tobytes() != before.tobytes():
                failures.append(f"{bits}-bit/{group}/model")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    report(8, "pack round trip", ok,
           f"3/4-bit x per-channel/g8, 14 layers each, lossless and bit-exact forward; failures: {failures or 'none'}",
           elapsed)
    assert ok


@pytest.mark.slow
def test_criterion_09_training_sanity():
    start = time.perf_counter()
    corpus = corpus_from_bytes(synthetic_text(120_000, seed=0))
    cfg = TinyLMConfig(d_model=64, n_layers=2, n_heads=4, ffn_hidden=128, context_length=64,
                       quant=QuantSpec(4), rank=16)
    tc = TrainConfig(batch_size=16, learning_rate=2e-4, total_iters=2000, warmup_sb_iters=1000, quant=cfg.quant)

    def run():
        model = build_model(cfg, seed=0)
        return run_training(model, corpus, tc)

    first = run()
    second = run()
    drop = 1.0 - first.final_perplexity / first.initial_perplexity
    deterministic = first.losses == second.losses and first.final_eval_loss == second.final_eval_loss
    elapsed = time.perf_counter() - start
    ok = corpus.ids.size >= 100_000 and drop >= 0.30 and deterministic and elapsed < 1800
    report(9, "training sanity", ok,
           f"S5 4-bit, 2 layers, d_model 64, {corpus.ids.size} bytes, {tc.total_iters} iters: eval ppl "
           f"{first.initial_perplexity:.2f} -> {first.final_perplexity:.2f} ({drop:.1%} drop, need >= 30%); "
           f"rerun bitwise identical {deterministic}", elapsed)
    assert ok


@pytest.mark.slow
def test_criterion_10_directional_ablation():
    """Soft criterion: the table is always reported; an ordering deviation is flagged, not failed."""
    start = time.perf_counter()
    corpus = corpus_from_bytes(synthetic_text(120_000, seed=0))
    cfg = TinyLMConfig(d_model=64, n_layers=2, n_heads=4, ffn_hidden=128, context_length=32, rank=16)
    base_model = build_model(cfg, seed=0)
    pretrain(base_model, corpus, 1000, lr=3e-3, batch_size=16)
    base = base_model.base_weights()

    def factory(setting, quant, seed):
        return build_model(replace(cfg, quant=quant, setting=setting), seed=seed, base_weights=base)

    tc = TrainConfig(batch_size=16, learning_rate=1e-3, total_iters=300, warmup_sb_iters=100, quant=QuantSpec(3))
    result = run_ablation(factory, corpus, tc, bit_widths=(3,), seeds=(0, 1, 2, 3, 4))
    elapsed = time.perf_counter() - start
    order = result.ordering(3)
    emit(result.table())
    structural = len(result.rows) == 6 and all(len(r.final_eval_losses) == 5 for r in result.rows)
    finite = all(np.isfinite(r.mean_loss) for r in result.rows)
    flags = ", ".join(f"{k} {'holds' if v else 'DEVIATES'}" for k, v in order.items())
    s5 = result.row(S.S5, 3).mean_loss
    report(10, "directional ablation (soft)", structural and finite,
           f"3-bit, 5 seeds, mean final eval loss S5 {s5:.4f} vs S1 {result.row(S.S1, 3).mean_loss:.4f}, "
           f"S2 {result.row(S.S2, 3).mean_loss:.4f}: {flags}", elapsed)
    assert structural and finite and elapsed < 3 * 3600
