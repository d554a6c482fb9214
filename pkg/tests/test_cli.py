import json
import os

import numpy as np
import pytest

from mhmr import cli
from mhmr.cli import EXIT, main


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"gen": {"n_max": 2}, "train": {"max_steps": 4,
                                                                "checkpoint_interval": 2}}))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_train_eval_infer(tmp_path, cfg_file, capsys):
    data = tmp_path / "d.bin"
    assert run("gen", "--config", cfg_file, "--count", 6, "--seed", 1, "--out", data) == 0
    out = tmp_path / "run"
    assert run("train", "--config", cfg_file, "--data", data, "--out", out, "--seed", 2) == 0
    ckpt = out / "checkpoint"
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 4
    assert run("eval", "--checkpoint", ckpt, "--data", data, "--tau", 0.02) == 0
    metrics = json.loads((ckpt / "metrics.json").read_text())
    assert 0 <= metrics["f1"] <= 1
    img = tmp_path / "empty.npy"
    np.save(img, np.zeros((40, 30, 3)))
    pred = tmp_path / "pred"
    assert run("infer", "--checkpoint", ckpt, "--image", img, "--out", pred) == 0
    assert json.loads((pred / "predictions.json").read_text()) == {"people": []}
    assert run("infer", "--checkpoint", ckpt, "--image", img, "--out", pred, "--tau", 0.001) == 0
    n = len(json.loads((pred / "predictions.json").read_text())["people"])
    assert n == len([f for f in os.listdir(pred) if f.endswith(".obj")])


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--count", 1) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["max_rel_error"] <= 1e-4


@pytest.mark.parametrize("cmd", ["gen", "train", "eval", "infer", "bench", "gradcheck"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen", "--bogus", "1"])
    assert e.value.code == EXIT["usage"]


def test_error_codes(tmp_path, capsys):
    assert len(set(EXIT.values())) == len(EXIT)
    assert run("eval", "--checkpoint", tmp_path / "missing", "--data", "x") == EXIT["missing_file"]
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_file"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("gen", "--config", bad, "--out", tmp_path / "d") == EXIT["config"]
    bad.write_text(json.dumps({"weird": {}}))
    assert run("gen", "--config", bad, "--out", tmp_path / "d") == EXIT["config"]
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"nothing here")
    assert run("train", "--data", junk, "--out", tmp_path / "r") == EXIT["format"]
    assert run("gen", "--count", 1) == EXIT["usage"]


def test_gradcheck_failure_code(monkeypatch, capsys):
    monkeypatch.setattr(cli, "gradcheck_run", lambda *a, **k: {"max_rel_error": 0.5})
    assert run("gradcheck") == EXIT["gradcheck"]
