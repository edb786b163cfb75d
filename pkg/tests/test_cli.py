import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from smalign import losses
from smalign.aligner import AlignHead, write_heads
from smalign.cli import main
from smalign.data import SynthConfig, generate, write_dataset

SMALL_SYNTH = dict(num_entities=40, views_x=2, views_y=3, latent_dim=4, dim_x=8, dim_y=12)
SMALL_TRAIN = dict(max_epochs=2, lr=1e-3, entities_per_batch=8, out_dim=8)


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture
def config(tmp_path):
    return write_config(tmp_path / "run.json", data={"synth": SMALL_SYNTH}, train=SMALL_TRAIN)


@pytest.fixture
def dataset(tmp_path, config):
    assert main(["gen", "--config", config, "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def test_dump_defaults(capsys):
    assert main(["config", "--dump-defaults"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"data", "train", "eval"}
    assert doc["train"]["lr"] == 1e-5 and doc["train"]["patience"] == 5
    assert doc["data"]["synth"]["views_y"] == 5 and doc["eval"]["ks"] == [1, 5]


def test_gen_writes_files_and_is_reproducible(tmp_path, config, dataset):
    names = sorted(p.name for p in dataset.iterdir())
    assert "manifest.json" in names and len(names) == 7
    assert main(["gen", "--config", config, "--out", str(tmp_path / "again")]) == 0
    for name in names:
        assert (dataset / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


@pytest.mark.parametrize("doc,key", [
    ({"train": {"epochs": 3}}, "train.epochs"),
    ({"data": {"synth": {"views": 3}}}, "data.synth.views"),
    ({"extra": {}}, "<root>.extra"),
    ({"eval": {"k": [1]}}, "eval.k"),
])
def test_unknown_keys_exit_2(tmp_path, capsys, doc, key):
    path = write_config(tmp_path / "bad.json", **doc)
    assert main(["gen", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert key in capsys.readouterr().err


def test_invalid_values_and_usage_exit_2(tmp_path):
    assert main(["train", "--config", write_config(tmp_path / "c.json", train={"lr": -1}), "--out", str(tmp_path)]) == 2
    assert main(["nonsense"]) == 2
    assert main(["eval", "--data", str(tmp_path)]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["gen", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "x")]) == 2


def test_unwritable_output_dir(tmp_path, config):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--config", config, "--out", str(blocker / "sub")]) == 2


def test_train_writes_artifacts(tmp_path, config, dataset):
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--data", str(dataset), "--out", str(out), "--loss", "flvmia"]) == 0
    for name in ("heads.smah", "checkpoint.json", "metrics.jsonl", "summary.csv", "state.npz"):
        assert (out / name).exists()
    lines = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert all(r["loss"] == "flvmia" for r in lines)
    assert json.loads((out / "checkpoint.json").read_text())["loss"] == "flvmia"
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert len(rows) == 3 and "centroid_gap" in rows[0]
    assert not [p for p in out.iterdir() if p.name.startswith(".")]  # no temp files left behind


def test_train_missing_data_exit_2(tmp_path, config):
    assert main(["train", "--config", config, "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 2


def test_train_divergence_exit_3(tmp_path, config, dataset, monkeypatch):
    def exploding(b, **kw):
        raise FloatingPointError("loss produced non-finite values")

    monkeypatch.setattr(losses, "loss_flqmia", exploding)
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--data", str(dataset), "--out", str(out)]) == 3
    assert (out / "heads.smah").exists()


def test_resume_reproduces_metrics(tmp_path, dataset):
    four = write_config(tmp_path / "four.json", train={**SMALL_TRAIN, "max_epochs": 4})
    two = write_config(tmp_path / "two.json", train={**SMALL_TRAIN, "max_epochs": 2})
    assert main(["train", "--config", four, "--data", str(dataset), "--out", str(tmp_path / "full")]) == 0
    assert main(["train", "--config", two, "--data", str(dataset), "--out", str(tmp_path / "part")]) == 0
    assert main(["train", "--config", four, "--data", str(dataset), "--out", str(tmp_path / "part"),
                 "--resume", str(tmp_path / "part" / "state.npz")]) == 0

    def metrics(d):
        rows = [json.loads(x) for x in (tmp_path / d / "metrics.jsonl").read_text().splitlines()]
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]

    assert metrics("full") == metrics("part")
    assert (tmp_path / "full" / "heads.smah").read_bytes() == (tmp_path / "part" / "heads.smah").read_bytes()
    assert main(["train", "--config", four, "--data", str(dataset), "--out", str(tmp_path / "p2"), "--seed", "9",
                 "--resume", str(tmp_path / "part" / "state.npz")]) == 2


def test_eval_output(tmp_path, config, dataset, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", config, "--data", str(dataset), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out), "--data", str(dataset)]) == 0
    first = capsys.readouterr().out
    doc = json.loads(first)
    assert set(doc) == {"split", "num_entities", "recall", "centroid_gap", "mean_pair_gap", "prototype_accuracy"}
    assert set(doc["recall"]) == {"i2t", "t2i"} and set(doc["recall"]["i2t"]) == {"1", "5"}
    assert main(["eval", "--checkpoint", str(out / "heads.smah"), "--data", str(dataset)]) == 0
    assert capsys.readouterr().out == first


def test_eval_oracle_checkpoint(tmp_path, capsys):
    ds = generate(SynthConfig(**{**SMALL_SYNTH, "noise_sigma": 0.0, "nonlinearity": "none"}))
    write_dataset(tmp_path / "d", ds)
    k = 4
    heads = [AlignHead("linear", 8, k, params={"W": np.linalg.pinv(ds.meta["mix_x"]).T, "b": np.zeros(k)}),
             AlignHead("linear", 12, k, params={"W": np.linalg.pinv(ds.meta["mix_y"]).T, "b": np.zeros(k)})]
    write_heads(tmp_path / "oracle.smah", heads)
    assert main(["eval", "--checkpoint", str(tmp_path / "oracle.smah"), "--data", str(tmp_path / "d"), "--ks", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["recall"]["i2t"]["1"] == 100.0 and doc["recall"]["t2i"]["1"] == 100.0


def test_eval_dim_mismatch_exit_2(tmp_path, dataset):
    write_heads(tmp_path / "h.smah", [AlignHead("linear", 5, 4), AlignHead("linear", 12, 4)])
    assert main(["eval", "--checkpoint", str(tmp_path / "h.smah"), "--data", str(dataset)]) == 2


def test_verify_fast_passes(capsys, tmp_path):
    assert main(["verify", "--level", "fast", "--out", str(tmp_path / "report.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and {c["name"] for c in report["checks"]} >= {"loss-gradients", "submodularity"}
    assert json.loads((tmp_path / "report.json").read_text())["ok"]


def test_verify_catches_gradient_sign_bug(capsys, monkeypatch):
    real = losses.loss_flqmia

    def mutated(b, tau=1.0, log_scale=losses.LOG_SCALE_INIT, negatives="contrast"):
        rep = real(b, tau=tau, log_scale=log_scale, negatives=negatives)
        rep.grad_y = -rep.grad_y
        return rep

    monkeypatch.setattr(losses, "loss_flqmia", mutated)
    assert main(["verify", "--level", "fast"]) == 3
    report = json.loads(capsys.readouterr().out)
    failed = {c["name"] for c in report["checks"] if not c["ok"]}
    assert "loss-gradients" in failed
    assert any("flqmia" in f for c in report["checks"] for f in c["failures"])


def test_bad_log_level(monkeypatch):
    monkeypatch.setenv("SMA_LOG", "chatty")
    assert main(["config", "--dump-defaults"]) == 2


def test_console_script_entry_point(tmp_path):
    env = {**os.environ, "SMA_LOG": "error"}
    proc = subprocess.run([sys.executable, "-m", "smalign.cli", "config", "--dump-defaults"],
                          capture_output=True, text=True, env=env, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["train"]["loss"] == "flqmia"
