import json
import os

import numpy as np
import pytest

from liseg import cli
from liseg.checkpoint import save_checkpoint
from liseg.config import ConfigError, Option, format_value, read_config_file, resolve, tuple_of
from liseg.stunet import preset, threshold_network
from liseg.training import read_loss_log

SMALL = ["--labeled", "2", "--unlabeled-bright", "1", "--unlabeled-dark", "1", "--val", "1", "--test", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------- config layering


def test_config_precedence(tmp_path):
    opts = [Option("lr", float, 1.0), Option("patch", tuple_of(int, 3), (8, 8, 8)), Option("name", str, "x")]
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nlr = 0.5\npatch = 4,4,4\n\nname = file\n")
    env = {"LISEG_LR": "0.25", "LISEG_NAME": "env"}
    out = resolve(opts, "train", f, {"name": "flag", "lr": None}, environ=env)
    assert out == {"lr": 0.25, "patch": (4, 4, 4), "name": "flag"}


def test_config_errors(tmp_path):
    opts = [Option("lr", float, 1.0)]
    f = tmp_path / "c.cfg"
    f.write_text("lr 0.5\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(f)
    f.write_text("momentum = 0.9\n")
    with pytest.raises(ConfigError, match="unknown key"):
        resolve(opts, "train", f, environ={})
    f.write_text("lr = fast\n")
    with pytest.raises(ConfigError, match="bad value"):
        resolve(opts, "train", f, environ={})
    f.write_text("command = eval\n")
    with pytest.raises(ConfigError, match="not 'train'"):
        resolve(opts, "train", f, environ={})


def test_format_value_roundtrip():
    opt = Option("p", tuple_of(float, 2), None)
    assert opt.parse(format_value((0.1, 2.0))) == (0.1, 2.0)
    assert format_value(True) == "true" and format_value(None) == ""


# ---------------------------------------------------------------- exit codes


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--mode", "mean-teacher"])
    assert exc.value.code == 1
    assert run("train", "--run-dir", tmp_path / "r") == 1  # no manifest
    assert run("synth", "--out", tmp_path / "s", "--liver-intensity", "0.1,0.2") == 1
    assert run("synth", "--out", tmp_path / "s", "--labeled", "-1") == 1


def test_eval_missing_checkpoint_exit_2(tmp_path):
    run("synth", "--out", tmp_path / "d", *SMALL)
    code = run("eval", "--checkpoint", tmp_path / "nope.ckpt", "--manifest", tmp_path / "d/manifest.json",
               "--run-dir", tmp_path / "e")
    assert code == 2


def test_lock_blocks_second_writer(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d/.lock").write_text(str(os.getpid()))
    assert run("synth", "--out", tmp_path / "d", *SMALL) == 2
    (tmp_path / "d/.lock").write_text("999999999")  # stale
    assert run("synth", "--out", tmp_path / "d", *SMALL) == 0
    assert not (tmp_path / "d/.lock").exists()


# ---------------------------------------------------------------- synth


def test_synth_reproducible_and_resolved_config(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "a", "--seed", 3, *SMALL) == 0
    assert run("synth", "--out", tmp_path / "b", "--seed", 3, *SMALL) == 0
    a = json.loads((tmp_path / "a/manifest.json").read_text())
    b = json.loads((tmp_path / "b/manifest.json").read_text())
    assert a == b
    resolved = read_config_file(tmp_path / "a/config.resolved")
    assert resolved["seed"] == "3" and resolved["command"] == "synth"
    assert run("synth", "--config", tmp_path / "a/config.resolved", "--out", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c/manifest.json").read_text()) == a


def test_synth_zero_cases(tmp_path):
    zero = ["--labeled", 0, "--unlabeled-bright", 0, "--unlabeled-dark", 0, "--val", 0, "--test", 0]
    assert run("synth", "--out", tmp_path / "z", *zero) == 0
    assert json.loads((tmp_path / "z/manifest.json").read_text())["cases"] == []


def test_synth_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("LISEG_TEST", "2")
    assert run("synth", "--out", tmp_path / "a", *SMALL[:-2]) == 0
    m = json.loads((tmp_path / "a/manifest.json").read_text())
    assert sum(c["split"] == "test" for c in m["cases"]) == 2


# ---------------------------------------------------------------- train / eval


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "d"), *SMALL, "--test-dark", "1"]) == 0
    return root / "d" / "manifest.json"


TRAIN = ["--batch-size", 2, "--steps-per-epoch", 1, "--epochs", 2]


def test_train_layout_and_resume(dataset, tmp_path, capsys):
    assert run("train", "--manifest", dataset, "--run-dir", tmp_path / "full", *TRAIN) == 0
    out = capsys.readouterr().out
    assert "final validation: DSC" in out
    for rel in ("config.resolved", "checkpoints/final_net1.ckpt", "logs/loss.csv", "reports/val_epoch_002.json"):
        assert (tmp_path / "full" / rel).exists(), rel
    assert run("train", "--manifest", dataset, "--run-dir", tmp_path / "part", *TRAIN, "--stop-after-epochs", 1) == 0
    assert run("train", "--run-dir", tmp_path / "part", "--resume", "--stop-after-epochs", "") == 0
    assert (tmp_path / "full/logs/loss.csv").read_bytes() == (tmp_path / "part/logs/loss.csv").read_bytes()


def test_train_supervised_equals_cps_lambda_zero(dataset, tmp_path):
    common = ["--manifest", dataset, "--batch-size", 2, "--steps-per-epoch", 2, "--epochs", 1, "--no-validate"]
    assert run("train", "--run-dir", tmp_path / "s", "--mode", "supervised", *common) == 0
    assert run("train", "--run-dir", tmp_path / "c", "--mode", "cps", "--lambda-max", 0, *common) == 0
    s, c = read_loss_log(tmp_path / "s/logs/loss.csv"), read_loss_log(tmp_path / "c/logs/loss.csv")
    assert [r["l_sup"] for r in s] == [r["l_sup"] for r in c]
    assert [r["total"] for r in s] == [r["total"] for r in c]


def test_eval_perfect_oracle_and_modality_filter(tmp_path):
    assert run("synth", "--out", tmp_path / "d", "--labeled", 0, "--unlabeled-bright", 0, "--unlabeled-dark", 0,
               "--val", 0, "--test", 1, "--test-dark", 1, "--noise-sigma", 0, "--blur-sigma", 0,
               "--lesion-count", "0,0", "--distractor-count", "0,0") == 0
    ckpt = tmp_path / "oracle.ckpt"
    save_checkpoint(threshold_network(preset("toy")), ckpt)
    before = ckpt.read_bytes()
    args = ["eval", "--checkpoint", ckpt, "--manifest", tmp_path / "d/manifest.json", "--modality", "bright", "--csv"]
    assert run(*args, "--run-dir", tmp_path / "e1") == 0
    assert run(*args, "--run-dir", tmp_path / "e2") == 0
    r1 = json.loads((tmp_path / "e1/reports/test_GED4-like.json").read_text())
    r2 = json.loads((tmp_path / "e2/reports/test_GED4-like.json").read_text())
    assert r1["aggregates"]["mean_dsc"] == 1.0 and r1["aggregates"]["count"] == 1
    assert all(c["modality"] == "GED4-like" for c in r1["per_case"])
    for r in (r1, r2):
        r["metadata"].pop("timestamp")
    assert r1 == r2
    assert (tmp_path / "e1/reports/test_GED4-like.csv").exists()
    assert ckpt.read_bytes() == before
    assert run("eval", "--checkpoint", ckpt, "--manifest", tmp_path / "d/manifest.json", "--modality", "dwi",
               "--run-dir", tmp_path / "e3") == 1


# ---------------------------------------------------------------- verify


def test_verify_params_and_metrics(capsys):
    assert run("verify", "params", "metrics") == 0
    out = capsys.readouterr().out
    assert "14.60M" in out and "100/100 exact" in out


def test_verify_failure_exit_3(monkeypatch, capsys):
    from liseg import verify

    monkeypatch.setattr(verify, "PARAM_TOLERANCE", 0.0)
    monkeypatch.setitem(verify.SUITES, "params", lambda: verify.run_params(0.0))
    assert run("verify", "params") == 3
    assert "failed checks" in capsys.readouterr().err
