import json
import os

import numpy as np
import pytest

import nalab.attention
from nalab.cli import main
from nalab.config import (
    ConfigError,
    config_diff,
    load_config,
    parse_config,
    resolved_dict,
)
from nalab.gradcheck import check_gradients
from nalab.tensor import Tensor, _result, mul, relu, sum_all


def tiny_config(tmp_path, **overrides):
    cfg = {
        "model": {"d_model": 16, "num_layers": 1, "num_heads": 2, "d_ff": 32,
                  "dropout_p": 0.1, "max_seq_len": 16},
        "train": {"max_steps": 12, "eval_every": 6, "log_every": 0,
                  "batch_size": 16, "seed": 5, "timing": False},
        "data": {"task": "reversal", "vocab_size": 14, "min_len": 2, "max_len": 5,
                 "num_train": 120, "num_val": 30, "seed": 7},
        "projection": "standard",
        "output_dir": str(tmp_path / "run"),
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


# --- config parsing ---------------------------------------------------------------

def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="nonsense"):
        parse_config({"nonsense": 1})
    with pytest.raises(ConfigError, match="model"):
        parse_config({"model": {"bogus_field": 3}})
    with pytest.raises(ConfigError):
        parse_config({"projection": "mlp"})


def test_defaults_materialized_in_resolved_echo(tmp_path):
    path, _ = tiny_config(tmp_path)
    cfg = load_config(path)
    doc = resolved_dict(cfg)
    assert doc["train"]["lr"] == 3e-4  # default filled in
    assert doc["model"]["expansion"] == 2
    assert "projection" not in doc["model"]  # owned by the top level
    # the echo re-parses to an identical resolved form
    assert resolved_dict(parse_config(doc)) == doc


def test_config_diff_paths():
    a = {"x": 1, "sub": {"y": 2, "z": 3}}
    b = {"x": 1, "sub": {"y": 5, "z": 3}}
    assert config_diff(a, b) == ["sub.y"]


def test_env_seed_override(tmp_path, monkeypatch):
    path, _ = tiny_config(tmp_path)
    monkeypatch.setenv("NALAB_SEED", "999")
    out = tmp_path / "envrun"
    assert main(["train", "--config", str(path), "--max-steps", "0",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "resolved.json").read_text())
    assert doc["train"]["seed"] == 999 and doc["data"]["seed"] == 999


# --- gen-data ----------------------------------------------------------------------

def test_gen_data_writes_files_and_sidecar(tmp_path):
    out = tmp_path / "data"
    args = ["gen-data", "--task", "reversal", "--vocab", "12", "--min-len", "2",
            "--max-len", "4", "--train", "50", "--val", "10", "--seed", "3",
            "--out", str(out)]
    assert main(args) == 0
    sidecar = json.loads((out / "dataset.json").read_text())
    assert sidecar["spec"]["seed"] == 3
    assert len((out / "train.tsv").read_text().splitlines()) == 50
    # re-running overwrites byte-identically
    before = {(out / n).read_bytes() for n in ("train.tsv", "val.tsv", "dataset.json")}
    assert main(args) == 0
    after = {(out / n).read_bytes() for n in ("train.tsv", "val.tsv", "dataset.json")}
    assert before == after


def test_gen_data_impossible_val_exits_2(tmp_path, capsys):
    args = ["gen-data", "--task", "reversal", "--vocab", "7", "--min-len", "1",
            "--max-len", "1", "--train", "2", "--val", "50",
            "--out", str(tmp_path / "x")]
    assert main(args) == 2
    assert "distinct" in capsys.readouterr().err


def test_gen_data_charmlm_from_packaged_corpus(tmp_path):
    out = tmp_path / "mlm"
    assert main(["gen-data", "--task", "charmlm", "--train", "100", "--val", "20",
                 "--window", "32", "--seed", "4", "--out", str(out)]) == 0
    sidecar = json.loads((out / "dataset.json").read_text())
    assert sidecar["spec"]["task"] == "charmlm"
    assert len((out / "train.txt").read_text().splitlines()) == 100


# --- train / eval -------------------------------------------------------------------

def test_train_writes_resolved_metrics_checkpoints(tmp_path):
    path, raw = tiny_config(tmp_path)
    assert main(["train", "--config", str(path)]) == 0
    out = tmp_path / "run"
    assert (out / "resolved.json").exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,seconds,train_loss,eval_loss,eval_accuracy,perplexity,bleu"
    assert (out / "best.ckpt").exists() and (out / "final.ckpt").exists()


def test_train_zero_steps_header_plus_step0(tmp_path):
    path, _ = tiny_config(tmp_path)
    out = tmp_path / "zero"
    assert main(["train", "--config", str(path), "--max-steps", "0",
                 "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,")


def test_projection_flag_wins_over_config(tmp_path):
    path, _ = tiny_config(tmp_path, projection="standard")
    out = tmp_path / "ovr"
    assert main(["train", "--config", str(path), "--projection", "neural",
                 "--max-steps", "0", "--out", str(out)]) == 0
    assert json.loads((out / "resolved.json").read_text())["projection"] == "neural"


def test_rerun_from_echoed_config_reproduces_run(tmp_path):
    path, _ = tiny_config(tmp_path)
    assert main(["train", "--config", str(path)]) == 0
    echoed = tmp_path / "run" / "resolved.json"
    doc = json.loads(echoed.read_text())
    doc["output_dir"] = str(tmp_path / "rerun")
    echoed2 = tmp_path / "echo.json"
    echoed2.write_text(json.dumps(doc))
    assert main(["train", "--config", str(echoed2)]) == 0
    assert (tmp_path / "run" / "metrics.csv").read_bytes() == \
           (tmp_path / "rerun" / "metrics.csv").read_bytes()


def test_eval_writes_deterministic_report(tmp_path):
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--task", "reversal", "--vocab", "14", "--min-len", "2",
                 "--max-len", "5", "--train", "120", "--val", "30", "--seed", "7",
                 "--out", str(data_dir)]) == 0
    path, _ = tiny_config(tmp_path)
    assert main(["train", "--config", str(path)]) == 0
    ckpt = tmp_path / "run" / "final.ckpt"
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data",
                 str(data_dir / "dataset.json"), "--out", str(r1)]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--data",
                 str(data_dir / "dataset.json"), "--out", str(r2)]) == 0
    assert r1.read_bytes() == r2.read_bytes()
    doc = json.loads(r1.read_text())
    assert "bleu_report" in doc and "perplexity_report" in doc


def test_eval_fresh_model_bleu_near_zero(tmp_path):
    data_dir = tmp_path / "data"
    main(["gen-data", "--task", "reversal", "--vocab", "14", "--min-len", "2",
          "--max-len", "5", "--train", "120", "--val", "30", "--seed", "7",
          "--out", str(data_dir)])
    path, _ = tiny_config(tmp_path)
    main(["train", "--config", str(path), "--max-steps", "0"])
    out = tmp_path / "fresh.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                 "--data", str(data_dir / "dataset.json"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["bleu_report"]["bleu"] < 5.0


def test_eval_vocab_mismatch_exits_3(tmp_path):
    data_dir = tmp_path / "data"
    main(["gen-data", "--task", "reversal", "--vocab", "30", "--train", "50",
          "--val", "10", "--out", str(data_dir)])
    path, _ = tiny_config(tmp_path)  # model trained with vocab 14
    main(["train", "--config", str(path), "--max-steps", "0"])
    rc = main(["eval", "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
               "--data", str(data_dir / "dataset.json")])
    assert rc == 3


def test_eval_missing_checkpoint_exits_3(tmp_path):
    rc = main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
               "--data", str(tmp_path / "nope.json")])
    assert rc == 3


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_train_divergence_exits_1(tmp_path):
    path, _ = tiny_config(tmp_path)
    cfg = json.loads(path.read_text())
    cfg["train"]["lr"] = 1e30
    cfg["train"]["clip_norm"] = 0.0
    cfg["model"]["dropout_p"] = 0.0
    cfg["output_dir"] = str(tmp_path / "boom")
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path)]) == 1
    assert (tmp_path / "boom" / "best.ckpt").exists()  # last good retained


# --- gradcheck ------------------------------------------------------------------------

def test_gradcheck_cli_passes_quickly(capsys):
    assert main(["gradcheck", "--coords", "2"]) == 0
    out = capsys.readouterr().out
    for group in ("attention/standard", "attention/dlp", "attention/neural",
                  "encoder-decoder/standard", "encoder-decoder/dlp",
                  "encoder-decoder/neural"):
        assert group in out
    assert "PASS" in out


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    # fixture op: forward identical to relu, backward off by 1%
    def corrupt_relu(x):
        pos = x.data > 0
        return _result(np.maximum(x.data, 0), (x,), lambda g: (g * pos * 1.01,), "relu")

    monkeypatch.setattr(nalab.attention, "relu", corrupt_relu)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 4)) + 2.0, dtype=np.float64, requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), dtype=np.float64)
    report = check_gradients(
        lambda: sum_all(mul(nalab.attention.relu(x), w)), {"x": x}
    )
    assert not report.passed
    # and the CLI surfaces the failure as exit code 1
    assert main(["gradcheck", "--coords", "2"]) == 1


# --- compare ------------------------------------------------------------------------

def test_compare_emits_three_rows_and_control_check(tmp_path):
    path, _ = tiny_config(tmp_path, output_dir=str(tmp_path / "cmp"))
    assert main(["compare", "--config", str(path)]) == 0
    lines = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
    assert lines[0] == "variant,bleu,perplexity,accuracy,params,steps_to_99acc"
    assert [l.split(",")[0] for l in lines[1:]] == ["standard", "dlp", "neural"]

    # params column reflects the projection swap; dlp and neural sizes match
    params = {l.split(",")[0]: int(l.split(",")[4]) for l in lines[1:]}
    assert params["dlp"] == params["neural"] > params["standard"]

    # per-variant echoes differ only in the projection field
    docs = {v: json.loads((tmp_path / "cmp" / v / "resolved.json").read_text())
            for v in ("standard", "dlp", "neural")}
    assert config_diff(docs["standard"], docs["neural"]) == ["projection"]
    report = json.loads((tmp_path / "cmp" / "compare_report.json").read_text())
    assert set(report) == {"rows", "ordering_observation", "note"}
