import json
import math

import numpy as np
import pytest
import yaml

from bpfc.cli import main
from bpfc.config import ConfigError, load_config, parse_config
from bpfc.experiment import RunManifest, compare_runs, run_evaluate, run_train
from bpfc.models import build_m_lenet, save_checkpoint

from conftest import write_synthetic_cifar


class TestConfig:
    def test_minimal_mnist_defaults(self):
        cfg = parse_config({"dataset": "mnist", "train": {"mode": "bpfc"}})
        assert cfg.train.quant.k == 7 and cfg.train.lambda_initial == 30 and cfg.arch == "m-lenet"
        assert cfg.train.early_stop_attack.eps == 0.3
        cifar = parse_config({"dataset": "CIFAR-10"})
        assert cifar.train.quant.k == 5 and cifar.arch == "resnet18" and cifar.train.lambda_step_factor == 9
        assert parse_config({"dataset": "F-MNIST"}).train.quant.k == 6

    def test_roundtrip(self):
        cfg = parse_config({"dataset": "mnist", "seed": 3, "train": {"quant": {"k": 6}, "epochs": 4},
                            "evaluate": {"suites": ["whitebox", "sanity"], "limit": 100}})
        again = parse_config(yaml.safe_load(cfg.to_yaml()))
        assert again == cfg and again.config_hash() == cfg.config_hash()

    @pytest.mark.parametrize("raw, message", [
        ({"dataset": "mnist", "train": {"quant": {"k": 0}}}, "train.quant: k must be in"),
        ({"dataset": "svhn"}, "dataset"),
        ({"train": {}}, "dataset: required"),
        ({"dataset": "mnist", "train": {"lr_schedule": 1}}, "unknown fields"),
        ({"dataset": "mnist", "evaluate": {"suites": ["bogus"]}}, "valid: whitebox"),
        ({"dataset": "mnist", "arch": "vgg"}, "arch"),
        ({"dataset": "mnist", "train": {"mode": "mixup"}}, "mode must be one of"),
        ({"dataset": "mnist", "colour": 1}, "unknown top-level"),
    ])
    def test_field_level_errors(self, raw, message):
        with pytest.raises(ConfigError, match=message):
            parse_config(raw)

    def test_missing_file_and_bad_yaml(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")
        (tmp_path / "bad.yaml").write_text("dataset: [mnist")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(tmp_path / "bad.yaml")


class TestExitCodes:
    def test_config_error_is_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("dataset: mnist\ntrain: {quant: {k: 0}}\n")
        assert main(["train", str(bad)]) == 1
        assert "k must be in" in capsys.readouterr().err

    def test_missing_data_is_2(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(f"dataset: mnist\ndata_root: {tmp_path / 'empty'}\noutput_dir: {tmp_path / 'run'}\n")
        assert main(["train", str(cfg)]) == 2
        assert "missing raw file" in capsys.readouterr().err

    def test_arch_mismatch_is_1(self, tmp_path, monkeypatch):
        ckpt = save_checkpoint(tmp_path / "m.pt", build_m_lenet(), "m-lenet")
        write_synthetic_cifar(tmp_path)
        code = main(["attack", "--checkpoint", str(ckpt), "--arch", "net-a", "--dataset", "cifar10",
                     "--data-root", str(tmp_path), "--attack", "fgsm"])
        assert code == 1

    def test_argparse_rejects_unknown_attack(self):
        with pytest.raises(SystemExit):
            main(["attack", "--checkpoint", "x", "--dataset", "mnist", "--attack", "boundary"])


@pytest.fixture(scope="module")
def cifar_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_synthetic_cifar(root)
    return root


@pytest.mark.slow
def test_cifar_smoke_pipeline(cifar_root, tmp_path, monkeypatch, capsys):
    """Two BPFC epochs of ResNet-18 on synthetic CIFAR-format data, then the white-box suite."""
    monkeypatch.setenv("BPFC_DATA_ROOT", str(cifar_root))
    raw = yaml.safe_load(open("configs/cifar10_smoke.yaml"))
    raw["output_dir"] = str(tmp_path / "smoke")
    cfg_path = tmp_path / "smoke.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))

    assert main(["train", str(cfg_path)]) == 0
    log = [json.loads(line) for line in open(tmp_path / "smoke" / "train_log.jsonl")]
    assert len(log) == 2 and all(math.isfinite(r["train_loss"]) for r in log)
    assert log[-1]["val_robust_acc"] is not None and log[0]["lambda"] == 1.0

    assert main(["evaluate", str(cfg_path)]) == 0
    man = RunManifest.read(tmp_path / "smoke" / "eval")
    rows = [json.loads(line) for line in open(man.reports["report"])]
    assert len(rows) >= 6
    assert all(r["error"] is None and 0 <= r["accuracy"] <= 1 for r in rows)
    assert all(r["mean_l2"] is None or math.isfinite(r["mean_l2"]) for r in rows)

    single = compare_runs([man.run_dir])
    assert list(single) == ["cifar10/bpfc"]
    ckpt = RunManifest.read(tmp_path / "smoke").checkpoints["best"]
    capsys.readouterr()
    assert main(["attack", "--checkpoint", ckpt, "--dataset", "cifar10", "--attack", "pgd", "--steps", "2",
                 "--limit", "8", "--restarts", "2"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert 0 <= record["accuracy"] <= 1 and record["threat"]["restarts"] == 2
    png = tmp_path / "q.png"
    assert main(["quantize-preview", "--dataset", "cifar10", "--output", str(png), "--indices", "0", "1"]) == 0
    assert png.stat().st_size > 0


def test_compare_marks_absent_and_rejects_mixed(tmp_path):
    from bpfc.evaluation import AttackRecord, EvalReport

    dirs = []
    for name, dataset, attacks in [("a", "mnist", {"clean": 0.99, "pgd-40": 0.8}),
                                   ("b", "mnist", {"clean": 0.99}), ("c", "fmnist", {"clean": 0.9})]:
        d = tmp_path / name
        d.mkdir()
        rep = EvalReport(name, dataset, [AttackRecord(k, None, 10, v, 0) for k, v in attacks.items()])
        rep.to_jsonl(d / "report.jsonl")
        RunManifest("h", "v", "evaluate", dataset, "bpfc" if name == "a" else "normal",
                    reports={"report": str(d / "report.jsonl")}, run_dir=str(d)).write(d)
        dirs.append(d)
    rows = compare_runs(dirs[:2], tmp_path / "t.csv")
    assert rows["mnist/normal"].get("pgd-40") is None
    lines = open(tmp_path / "t.csv").read().splitlines()
    assert lines[2].endswith("absent")
    with pytest.raises(ConfigError, match="different datasets"):
        compare_runs(dirs)


def test_run_evaluate_requires_checkpoint(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"dataset: mnist\noutput_dir: {tmp_path / 'none'}\n")
    with pytest.raises(ConfigError, match="no checkpoint"):
        run_evaluate(cfg)


def test_run_train_reproducible(cifar_root, tmp_path, monkeypatch):
    """Same config and seed give identical validation metrics."""
    monkeypatch.setenv("BPFC_DATA_ROOT", str(cifar_root))
    raw = {"dataset": "cifar10", "arch": "resnet18", "seed": 5,
           "train": {"mode": "normal", "epochs": 1, "early_stop_window": 1, "train_limit": 32, "val_limit": 32,
                     "val_attack_limit": 8, "batch_size": 16}}
    metrics = []
    for run in ("r1", "r2"):
        raw["output_dir"] = str(tmp_path / run)
        path = tmp_path / f"{run}.yaml"
        path.write_text(yaml.safe_dump(raw))
        run_train(path)
        metrics.append(open(tmp_path / run / "train_log.jsonl").read())
    assert metrics[0] == metrics[1]
    assert np.isfinite(json.loads(metrics[0])["train_loss"])
