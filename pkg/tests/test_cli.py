import json
import subprocess
import sys

import pytest

from minmaxsim.checkpoint import load_checkpoint
from minmaxsim.cli import main
from minmaxsim.config import ConfigError, load_run_config, parse_run_config
from minmaxsim.data import SplitManifest

TINY = {
    "seed": 5,
    "data": {"n_images": 6, "size": [32, 32], "unlabeled_per_image": 1, "test_images": 2},
    "augment": {"target_size": [32, 32]},
    "model": {"seg": {"encoder_base_channels": 8},
              "classifier": {"conv_channels": 8, "out_dim": 16},
              "projector": {"conv_channels": 8, "out_dim": 8}},
    "train": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001, "k_neg": "all"},
    "eval": {"threshold": 0.5, "mode": "ensemble"},
}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    cfg = _write(ws / "run.json", TINY)
    assert main(["synth", "--config", cfg, "--out", str(ws / "data")]) == 0
    assert main(["split", "--data", str(ws / "data"), "--fraction", "1.0", "--seed", "0",
                 "--test", str(ws / "data" / "test"), "--out", str(ws / "manifest.json")]) == 0
    return ws


# config parsing

def test_config_defaults_and_seed():
    cfg = parse_run_config({"seed": 9})
    assert cfg.train.seed == 9 and cfg.data.synth.seed == 9
    assert cfg.train.learning_rate == 1e-4 and cfg.eval.mode == "ensemble"
    assert parse_run_config(cfg.to_dict()) == cfg


@pytest.mark.parametrize("doc", [
    {},
    {"seed": "1"},
    {"seed": 1, "trian": {}},
    {"seed": 1, "train": {"epoch": 3}},
    {"seed": 1, "model": {"seg": {"base": 8}}},
    {"seed": 1, "augment": {"flip_prob": 2.0}},
    {"seed": 1, "train": {"loss_weights": {"sup": 1, "nce_supp": 0}}},
    {"seed": 1, "eval": {"mode": "ensemble", "dump_dir": "x"}},
])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        parse_run_config(doc)


def test_config_file_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json")


# exit codes

def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["split", "--fraction", "0.5"]) == 1
    assert "usage" in capsys.readouterr().err
    cfg = _write(tmp_path / "c.json", {"seed": 1, "data": {"colour": 3}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 1


def test_split_validation_error_exits_one(workspace):
    assert main(["split", "--data", str(workspace / "data"), "--fraction", "1.5", "--seed", "0",
                 "--out", str(workspace / "x.json")]) == 1


def test_missing_data_root(monkeypatch, tmp_path):
    monkeypatch.delenv("MMS_DATA_ROOT", raising=False)
    assert main(["split", "--fraction", "0.5", "--seed", "0", "--out", str(tmp_path / "m.json")]) == 1


def test_data_root_from_environment(workspace, monkeypatch, tmp_path):
    monkeypatch.setenv("MMS_DATA_ROOT", str(workspace / "data"))
    assert main(["split", "--fraction", "0.5", "--seed", "1", "--out", str(tmp_path / "m.json")]) == 0
    m = SplitManifest.load(tmp_path / "m.json")
    assert len(m.labeled_x1) + len(m.labeled_x2) == 3


# subcommands

def test_synth_layout(workspace):
    data = workspace / "data"
    assert len(list((data / "masks").glob("*.png"))) == 6
    assert len(list((data / "images").glob("*.png"))) == 12
    assert len(list((data / "test" / "masks").glob("*.png"))) == 2
    assert (data / "config.resolved.json").exists()


def test_split_472_images_at_5_percent(tmp_path):
    cfg = _write(tmp_path / "c.json", {"seed": 0, "data": {"n_images": 472, "size": [16, 16]}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    assert main(["split", "--data", str(tmp_path / "d"), "--fraction", "0.05", "--seed", "3",
                 "--out", str(tmp_path / "m.json")]) == 0
    m = SplitManifest.load(tmp_path / "m.json")
    assert len(m.labeled_x1) == len(m.labeled_x2) == 12


def test_train_epochs_zero(workspace, tmp_path):
    cfg = _write(tmp_path / "c.json", {**TINY, "train": {**TINY["train"], "epochs": 0}})
    run = tmp_path / "run0"
    assert main(["train", "--manifest", str(workspace / "manifest.json"), "--config", cfg, "--out", str(run)]) == 0
    assert load_checkpoint(run / "checkpoint.mms").epoch == 0
    assert (run / "config.resolved.json").exists() and (run / "manifest.json").exists()


def test_train_run_directory_reproduces_bit_for_bit(workspace, tmp_path):
    cfg = str(workspace / "run.json")
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(workspace / "manifest.json"), "--config", cfg, "--out", str(run)]) == 0
    assert sorted(p.name for p in run.iterdir()) == ["checkpoint.mms", "config.resolved.json",
                                                     "manifest.json", "metrics.jsonl"]
    again = tmp_path / "again"
    assert main(["train", "--manifest", str(run / "manifest.json"), "--config", str(run / "config.resolved.json"),
                 "--out", str(again)]) == 0
    for name in ("checkpoint.mms", "metrics.jsonl", "config.resolved.json"):
        assert (run / name).read_bytes() == (again / name).read_bytes()


@pytest.mark.parametrize("flags, method, heads", [
    (["--no-classifiers"], "mms", (False, True)),
    (["--no-classifiers", "--no-projectors"], "mms", (False, False)),
    (["--supervised-only"], "supervised", (False, False)),
])
def test_train_modes(workspace, tmp_path, flags, method, heads):
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(workspace / "manifest.json"), "--config", str(workspace / "run.json"),
                 "--out", str(run), *flags]) == 0
    state = load_checkpoint(run / "checkpoint.mms")
    assert state.meta["method"] == method
    assert (state.model.has_classifiers, state.model.has_projectors) == heads
    echo = json.loads((run / "config.resolved.json").read_text())
    assert echo["train"]["use_classifiers"] is False


def test_supervised_only_on_partial_labels_uses_both_networks(workspace, tmp_path):
    assert main(["split", "--data", str(workspace / "data"), "--fraction", "0.5", "--seed", "0",
                 "--out", str(tmp_path / "m.json")]) == 0
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(tmp_path / "m.json"), "--config", str(workspace / "run.json"),
                 "--out", str(run), "--supervised-only"]) == 0
    rows = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    assert rows[0]["l_sim"] == rows[0]["l_nce"] == rows[0]["l_nce_sup"] == 0.0


def test_eval_and_report(workspace, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(workspace / "manifest.json"), "--config", str(workspace / "run.json"),
                 "--out", str(run)]) == 0
    csv_a, csv_b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.mms"), "--test", str(workspace / "data" / "test"),
                 "--out", str(csv_a), "--dump", str(tmp_path / "masks")]) == 0
    assert main(["eval", "--checkpoint", str(run / "checkpoint.mms"), "--test", str(workspace / "data" / "test"),
                 "--out", str(csv_b), "--mode", "net1", "--method", "mms-net1"]) == 0
    assert len(list((tmp_path / "masks").glob("*.png"))) == 2
    assert csv_a.read_text().splitlines()[0] == "method,label_fraction,path,dsc,dsc_net1,dsc_net2,error"
    assert main(["report", "--inputs", str(csv_a), str(csv_b), "--out", str(tmp_path / "t.csv")]) == 0
    table = (tmp_path / "t.csv").read_text().splitlines()
    assert table[0] == "Method,l_a = 100%" and table[1].startswith("mms,") and table[2].startswith("mms-net1,")
    assert main(["report", "--inputs", str(csv_a), "--labels", "a", "b", "--out", str(tmp_path / "u.csv")]) == 1


def test_eval_failures(workspace, tmp_path):
    bad = tmp_path / "bad.mms"
    bad.write_bytes(b"MMSCKPT\x00" + b"\x00" * 64)
    assert main(["eval", "--checkpoint", str(bad), "--test", str(workspace / "data" / "test"),
                 "--out", str(tmp_path / "r.csv")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.mms"), "--test", str(workspace / "data" / "test"),
                 "--out", str(tmp_path / "r.csv")]) == 1


def test_selftest_passes():
    proc = subprocess.run([sys.executable, "-m", "minmaxsim", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "all checks passed" in proc.stdout
    assert proc.stdout.count("PASS") == 5
