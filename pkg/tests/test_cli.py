import json

import numpy as np
import pytest

from dlqat import cli
from dlqat.checkpoint import load_checkpoint, save_checkpoint
from dlqat.config import SCHEMA, ConfigError, default_config_text, parse_config
from dlqat.data import synthetic_text
from dlqat.model import build_model
from dlqat.packing import packed_size
from dlqat.trainer import DivergenceError

TOY = """
[model]
d_model = 32
n_layers = 1
n_heads = 4
ffn_hidden = 64
context_length = 16

[quant]
bits = {bits}

[train]
iters = 12
warmup_sb_iters = 4
lr = 0.002
batch_size = 4
rank = 4
ablation_bits = 3 4
ablation_seeds = 2
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "corpus.txt").write_bytes(synthetic_text(8_000, seed=1))
    (tmp_path / "run.ini").write_text(TOY.format(bits=4))
    return tmp_path


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# -- config ---------------------------------------------------------------

def test_every_key_documented_with_default():
    cfg = parse_config(default_config_text())
    for section, keys in SCHEMA.items():
        assert set(cfg.raw[section]) == set(keys)
        assert all(doc for _, _, doc in keys.values())


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="ranks"):
        parse_config("[train]\nranks = 3\n")


def test_unknown_section_named():
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config("[optimizer]\nlr = 1\n")


@pytest.mark.parametrize("text", [
    "[quant]\nbits = four\n",
    "[quant]\nbits = 9\n",
    "[quant]\ngranularity = group\ngroup_size = 48\n",
    "[quant]\ngranularity = rows\n",
    "[train]\nrank = 40\n",
    "[train]\niters = 100\nwarmup_sb_iters = 100\n",
    "[train]\nsetting = 7\n",
])
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_paths_relative_to_config(tmp_path):
    cfg = parse_config("[data]\ncorpus = c.txt\n", base_dir=tmp_path)
    assert cfg["data"]["corpus"] == str(tmp_path / "c.txt")


def test_raw_values_echo_text():
    cfg = parse_config("[train]\nlr = 2e-4\n")
    assert cfg.raw["train"]["lr"] == "2e-4"
    assert cfg.train_config().learning_rate == 2e-4


# -- checkpoint -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, toy_config, rng):
    model = build_model(toy_config, seed=4)
    for layer in model.linears().values():
        layer.adapter.B.data = rng.normal(size=layer.adapter.B.shape)
    model.linears()["layers.1.v"].freeze_sb()
    save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    ids = rng.integers(0, 256, size=(2, 16))
    assert back(ids).data.tobytes() == model(ids).data.tobytes()
    assert back.linears()["layers.1.v"].qparams.frozen_sb
    assert back.config == model.config


# -- commands -------------------------------------------------------------

def test_train_happy_path(workdir, capsys):
    assert cli.main(["train", "--config", str(workdir / "run.ini")]) == 0
    recs = records(workdir / "report.jsonl")
    header, iters, summary = recs[0], recs[1:-1], recs[-1]
    assert header["type"] == "header" and header["format_version"] == cli.REPORT_FORMAT
    assert header["config"]["train"]["iters"] == "12"
    assert len(iters) == 12 and all(r["type"] == "iter" for r in iters)
    assert set(iters[0]) == {"type", "iter", "phase", "loss", "grad_norms"}
    assert summary["type"] == "summary" and summary["iters"] == 12
    assert "perplexity" in capsys.readouterr().out
    assert (workdir / "model.npz").exists()


def test_train_rerun_identical_trace(workdir):
    traces = []
    for out in ("a.jsonl", "b.jsonl"):
        assert cli.main(["train", "--config", str(workdir / "run.ini"), "--out", str(workdir / out)]) == 0
        traces.append([json.dumps(r) for r in records(workdir / out) if r["type"] == "iter"])
    assert traces[0] == traces[1]


def test_seed_flag_changes_trace(workdir):
    cli.main(["train", "--config", str(workdir / "run.ini"), "--out", str(workdir / "a.jsonl")])
    cli.main(["train", "--config", str(workdir / "run.ini"), "--seed", "5", "--out", str(workdir / "b.jsonl")])
    a, b = records(workdir / "a.jsonl"), records(workdir / "b.jsonl")
    assert b[0]["config"]["train"]["seed"] == "5"
    assert [r["loss"] for r in a[1:-1]] != [r["loss"] for r in b[1:-1]]


def test_unknown_key_exit_code(workdir, capsys):
    (workdir / "bad.ini").write_text("[train]\nranks = 3\n")
    assert cli.main(["train", "--config", str(workdir / "bad.ini")]) == cli.EXIT_CONFIG
    assert "ranks" in capsys.readouterr().err


def test_missing_config_is_config_error(workdir):
    assert cli.main(["train", "--config", str(workdir / "nope.ini")]) == cli.EXIT_CONFIG


def test_missing_corpus_is_data_error(workdir):
    (workdir / "run.ini").write_text(TOY.format(bits=4) + "[data]\ncorpus = missing.txt\n")
    assert cli.main(["train", "--config", str(workdir / "run.ini")]) == cli.EXIT_IO


def test_divergence_exit_code(workdir, monkeypatch):
    def boom(*args, **kwargs):
        raise DivergenceError(7)

    monkeypatch.setattr(cli, "run_training", boom)
    assert cli.main(["train", "--config", str(workdir / "run.ini")]) == cli.EXIT_DIVERGED
    assert records(workdir / "report.jsonl")[-1] == {"type": "error", "iteration": 7,
                                                     "message": "non-finite loss at iteration 7"}


def test_exit_codes_distinct():
    codes = [cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_IO, cli.EXIT_DIVERGED, cli.EXIT_CHECK_FAILED, cli.EXIT_PACK_FORMAT]
    assert len(set(codes)) == len(codes)


def test_bad_arguments():
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG


def test_pack_then_eval_identical(workdir, capsys):
    ini = str(workdir / "run.ini")
    assert cli.main(["train", "--config", ini]) == 0
    assert cli.main(["pack", "--config", ini]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--config", ini, "--json"]) == 0
    direct = json.loads(capsys.readouterr().out)["perplexity"]
    assert cli.main(["eval", "--config", ini, "--pack", str(workdir / "model.dlqt"), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["perplexity"] == direct


def test_pack_size_three_bit(workdir, capsys):
    (workdir / "run.ini").write_text(TOY.format(bits=3))
    ini = str(workdir / "run.ini")
    cli.main(["train", "--config", ini])
    capsys.readouterr()
    assert cli.main(["pack", "--config", ini, "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    model = load_checkpoint(workdir / "model.npz")
    grid = sum(packed_size(l.shape[0] * l.shape[1], 3) for l in model.linears().values())
    meta = sum(12 * l.qparams.s.size for l in model.linears().values())
    names = sum(2 + len(n) + 1 + 8 for n in model.linears())
    assert info["grid_bytes"] == grid
    assert (workdir / "model.dlqt").stat().st_size == 12 + names + grid + meta + 4


def test_eval_corrupt_pack(workdir):
    ini = str(workdir / "run.ini")
    cli.main(["train", "--config", ini])
    cli.main(["pack", "--config", ini])
    raw = bytearray((workdir / "model.dlqt").read_bytes())
    raw[40] ^= 1
    (workdir / "bad.dlqt").write_bytes(bytes(raw))
    assert cli.main(["eval", "--config", ini, "--pack", str(workdir / "bad.dlqt")]) == cli.EXIT_PACK_FORMAT
    (workdir / "junk.dlqt").write_bytes(b"nope")
    assert cli.main(["eval", "--config", ini, "--pack", str(workdir / "junk.dlqt")]) == cli.EXIT_PACK_FORMAT


def test_eval_uniform_model(workdir, capsys):
    ini = str(workdir / "run.ini")
    cli.main(["train", "--config", ini])
    model = load_checkpoint(workdir / "model.npz")
    model.head.data[:] = 0.0
    save_checkpoint(model, workdir / "model.npz")
    capsys.readouterr()
    cli.main(["eval", "--config", ini, "--json"])
    assert json.loads(capsys.readouterr().out)["perplexity"] == pytest.approx(256, abs=1e-6)


def test_audit(capsys):
    assert cli.main(["audit", "--arch", "llama-7b", "--json"]) == 0
    row = json.loads(capsys.readouterr().out)
    assert abs(row["count_mAB"] - 41e6) / 41e6 <= 0.05 and row["below_1pct"] is True
    assert cli.main(["audit", "--arch", "llama-13b", "--json"]) == 0
    assert abs(json.loads(capsys.readouterr().out)["count_mAB"] - 65e6) / 65e6 <= 0.05
    assert cli.main(["audit", "--arch", "llama-7b"]) == 0
    assert "m,A,B parameters" in capsys.readouterr().out


def test_audit_unknown_arch(capsys):
    assert cli.main(["audit", "--arch", "gpt-9"]) == cli.EXIT_CONFIG
    assert "gpt-9" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "ste d/ds" in out and "magnitude (m)" in out


def test_gradcheck_failure_exit(monkeypatch, capsys):
    from dlqat.gradcheck import CheckResult

    monkeypatch.setattr(cli, "run_all", lambda seed: [CheckResult("x", 1.0, 1e-4, "fd")])
    assert cli.main(["gradcheck"]) == cli.EXIT_CHECK_FAILED


def test_ablation_rows(workdir, capsys):
    (workdir / "run.ini").write_text(TOY.format(bits=4).replace("iters = 12", "iters = 3").replace(
        "warmup_sb_iters = 4", "warmup_sb_iters = 1"))
    assert cli.main(["ablation", "--config", str(workdir / "run.ini")]) == 0
    out = capsys.readouterr().out
    assert "3-bit" in out and "4-bit" in out and "Learn then fix" in out
    rows = [r for r in records(workdir / "report.jsonl") if r["type"] == "row"]
    assert len(rows) == 12
    assert all(r["seeds"] == 2 and r["std_loss"] >= 0 for r in rows)
    assert {r["m"] for r in rows} == {"N/A", "Learn"}
