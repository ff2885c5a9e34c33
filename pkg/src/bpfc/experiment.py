"""Reproducible runs: training, evaluation and cross-run comparison.

Each run owns one output directory holding the resolved config, the
artifacts it produced and a ``manifest.json`` written atomically at the end.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .attacks import derive_seed
from .config import ConfigError, ExperimentConfig, load_config
from .data import load_dataset
from .models import build_model, load_checkpoint, save_checkpoint
from .train import train

log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    kind: str
    dataset: str
    mode: str
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    run_dir: str = ""

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        tmp = path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2))
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls(**json.loads(path.read_text()))


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _prepare_dir(cfg: ExperimentConfig, output_dir=None) -> Path:
    run_dir = Path(output_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    return run_dir


def train_from_config(cfg: ExperimentConfig, output_dir=None) -> RunManifest:
    run_dir = _prepare_dir(cfg, output_dir)
    started = _now()
    train_set, val_set, _test, spec = load_dataset(cfg.dataset, seed=cfg.seed, root=cfg.data_root)
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = build_model(cfg.arch)

    log_path = run_dir / "train_log.jsonl"
    log_path.write_text("")
    ckpts = {}

    def on_epoch(rec):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec.to_log()) + "\n")

    def on_checkpoint(tag, state, rec):
        path = run_dir / f"{tag}.pt"
        probe = build_model(cfg.arch)
        probe.load_state_dict(state)
        save_checkpoint(path, probe, cfg.arch, cfg.to_dict(), {"epoch": rec.epoch,
                                                              "val_robust_acc": rec.val_robust_acc})
        ckpts[tag] = str(path)

    result = train(model, (train_set, val_set), cfg.train, on_epoch=on_epoch, on_checkpoint=on_checkpoint)
    if "best" not in ckpts:
        ckpts["best"] = ckpts["final"]
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_robust_acc": result.best_val_robust_acc,
        "final_val_clean_acc": result.history[-1].val_clean_acc,
        "val_class_histogram": spec.val_class_histogram,
    }
    (run_dir / "train_summary.json").write_text(json.dumps(summary, indent=2))
    manifest = RunManifest(
        config_hash=cfg.config_hash(), code_version=code_version(), kind="train",
        dataset=cfg.dataset, mode=cfg.train.mode, checkpoints=ckpts,
        reports={"train_log": str(log_path), "train_summary": str(run_dir / "train_summary.json")},
        started=started, finished=_now(), run_dir=str(run_dir))
    manifest.write(run_dir)
    return manifest


def run_train(config_path, output_dir=None) -> RunManifest:
    """Train from a config file; writes checkpoints, the JSON-lines log and the manifest."""
    return train_from_config(load_config(config_path), output_dir)


def checkpoint_model(path, arch: str | None = None):
    try:
        return load_checkpoint(path, arch)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _suite_options(cfg: ExperimentConfig, suite: str) -> dict:
    opts = cfg.evaluate.options.get(suite) or {}
    if not isinstance(opts, dict):
        raise ConfigError(f"evaluate.options.{suite}: must be a mapping")
    return dict(opts)


def evaluate_from_config(cfg: ExperimentConfig, checkpoint=None, output_dir=None) -> RunManifest:
    """Run every configured evaluation suite against one checkpoint.

    The checkpoint defaults to ``best`` from the training manifest in
    ``cfg.output_dir``. Reports land in ``<output_dir>/eval``.
    """
    from . import evaluation as E

    train_dir = Path(cfg.output_dir)
    if checkpoint is None:
        try:
            checkpoint = RunManifest.read(train_dir).checkpoints["best"]
        except (FileNotFoundError, KeyError):
            raise ConfigError(f"no checkpoint given and no trained run in {train_dir}") from None
    model, meta = checkpoint_model(checkpoint, cfg.arch)
    run_dir = Path(output_dir or train_dir / "eval")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    started = _now()
    _train, _val, test, spec = load_dataset(cfg.dataset, seed=cfg.seed, root=cfg.data_root)
    data = test.head(cfg.evaluate.limit)
    model_id = f"{cfg.dataset}-{cfg.train.mode}-{cfg.arch}"
    source = None
    if cfg.evaluate.source_checkpoint:
        source, _ = checkpoint_model(cfg.evaluate.source_checkpoint)
    reports = {}
    combined = E.EvalReport(model_id, cfg.dataset)

    for suite in cfg.evaluate.suites:
        opts = _suite_options(cfg, suite)
        seed = derive_seed(cfg.seed, "evaluate", suite)
        if suite == "whitebox":
            rep = E.whitebox_suite(model, data, spec, seed=seed, model_id=model_id, **opts)
            combined.records += rep.records
        elif suite == "blackbox":
            if source is None:
                raise ConfigError("evaluate.source_checkpoint: required by the blackbox suite")
            tm = spec.default_threat.with_(steps=opts.pop("steps", spec.default_threat.steps))
            rep = E.blackbox_suite(model, source, data, tm, seed=seed, model_id=model_id,
                                   dataset=cfg.dataset, **opts)
            combined.records += rep.records
        elif suite == "restarts":
            counts = opts.pop("counts", [1, 10, 50, 100])
            steps = opts.pop("steps", 100)
            sample = data.head(opts.pop("limit", None))
            study = E.restart_study(model, sample, spec.default_threat.with_(steps=steps), counts, seed=seed,
                                    **opts)
            path = run_dir / "restarts.json"
            path.write_text(json.dumps({"steps": steps, "n_samples": len(sample),
                                        "accuracy": {str(k): v for k, v in study.items()}}, indent=2))
            reports["restarts"] = str(path)
            continue
        elif suite == "sanity":
            verdicts = E.sanity_checks(model, data, spec, source_model=source, seed=seed, plot_dir=run_dir,
                                       **opts)
            combined.sanity = verdicts
            path = run_dir / "sanity.json"
            path.write_text(json.dumps(verdicts, indent=2))
            reports["sanity"] = str(path)
            continue
        elif suite == "curve":
            attack = opts.pop("attack", "pgd")
            if attack not in E.BOUNDED_ATTACKS:
                raise ConfigError(f"evaluate.options.curve.attack: unknown attack id {attack!r}; "
                                  f"valid ids: {', '.join(E.BOUNDED_ATTACKS)}")
            grid = opts.pop("eps_grid", None) or [spec.default_threat.eps * f for f in (0, 0.5, 1, 1.5, 2)]
            steps = opts.pop("steps", spec.default_threat.steps)
            table = E.curve_sweep(model, data, attack, grid, spec.default_threat.with_(
                eps=0.0, steps=1 if attack == "fgsm" else steps, random_start=attack == "pgd"),
                seed=seed, plot_path=run_dir / f"curve_{attack}.png", **opts)
            path = run_dir / f"curve_{attack}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["eps", "accuracy", "mean_loss"])
                w.writerows(table.rows())
            reports["curve"] = str(path)
            continue
        reports[suite] = str(rep.to_jsonl(run_dir / f"{suite}.jsonl"))

    if combined.records:
        reports["report"] = str(combined.to_jsonl(run_dir / "report.jsonl"))
        reports["table"] = str(E.write_csv(run_dir / "table.csv", {cfg.train.mode: combined.accuracies()}))
    manifest = RunManifest(
        config_hash=cfg.config_hash(), code_version=code_version(), kind="evaluate",
        dataset=cfg.dataset, mode=cfg.train.mode, checkpoints={"evaluated": str(checkpoint)},
        reports=reports, started=started, finished=_now(), run_dir=str(run_dir))
    manifest.write(run_dir)
    return manifest


def run_evaluate(config_path, checkpoint=None, output_dir=None) -> RunManifest:
    """Evaluate a checkpoint with the suites listed in a config file."""
    return evaluate_from_config(load_config(config_path), checkpoint, output_dir)


def compare_runs(manifest_paths, output_csv=None) -> dict:
    """Merge evaluation manifests into one ``{row: {attack: accuracy}}`` table.

    Rows are labelled ``dataset/mode`` (suffixed on collision). Attacks a run
    did not evaluate show up as ``absent`` in the CSV.
    """
    from .evaluation import EvalReport, write_csv

    rows = {}
    datasets = set()
    for path in manifest_paths:
        man = RunManifest.read(path)
        if "report" not in man.reports:
            raise ConfigError(f"{path}: manifest has no evaluation report")
        datasets.add(man.dataset)
        if len(datasets) > 1:
            raise ConfigError(f"cannot compare runs on different datasets: {sorted(datasets)}")
        rep = EvalReport.from_jsonl(man.reports["report"])
        label = f"{man.dataset}/{man.mode}"
        i = 2
        while label in rows:
            label = f"{man.dataset}/{man.mode}#{i}"
            i += 1
        rows[label] = rep.accuracies()
    if output_csv is not None:
        write_csv(output_csv, rows)
    return rows
