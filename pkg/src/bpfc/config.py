"""Experiment configuration files.

A config is a YAML mapping. Only ``dataset`` is required; everything else is
filled from the dataset's defaults::

    dataset: mnist          # mnist | fmnist | cifar10
    arch: m-lenet           # m-lenet | net-a | resnet18 (default by dataset)
    seed: 0                 # the single source of randomness
    output_dir: runs/mnist-bpfc
    data_root: null         # falls back to $BPFC_DATA_ROOT, then ./data
    train:                  # any TrainConfig field
      mode: bpfc
      lambda_initial: 30
      quant: {k: 7}
    evaluate:
      suites: [whitebox]    # whitebox | blackbox | restarts | sanity | curve
      limit: 1000           # test images per suite (null = all)
      source_checkpoint: null
      options: {}           # per-suite keyword overrides
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .attacks import ThreatModel
from .data import DatasetError, canonical_name, default_quant_config
from .quantize import QuantConfig
from .train import TrainConfig

SUITES = ("whitebox", "blackbox", "restarts", "sanity", "curve")
_DEFAULT_ARCH = {"mnist": "m-lenet", "fmnist": "m-lenet", "cifar10": "resnet18"}
_TOP_KEYS = {"dataset", "arch", "seed", "output_dir", "data_root", "train", "evaluate"}


class ConfigError(ValueError):
    pass


@dataclass
class EvaluateConfig:
    suites: list = field(default_factory=lambda: ["whitebox"])
    limit: int | None = 1000
    source_checkpoint: str | None = None
    options: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    dataset: str
    train: TrainConfig
    arch: str = ""
    seed: int = 0
    output_dir: str = "runs/default"
    data_root: str | None = None
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "arch": self.arch,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data_root": self.data_root,
            "train": self.train.to_dict(),
            "evaluate": {f.name: copy.deepcopy(getattr(self.evaluate, f.name)) for f in fields(EvaluateConfig)},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _sub(path, exc):
    return ConfigError(f"{path}: {exc}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping and fill dataset defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "dataset" not in raw:
        raise ConfigError("dataset: required")
    try:
        dataset = canonical_name(str(raw["dataset"]))
    except DatasetError as exc:
        raise _sub("dataset", exc) from None
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: must be an integer")

    train_raw = dict(raw.get("train") or {})
    train_fields = {f.name for f in fields(TrainConfig)}
    bad = set(train_raw) - train_fields
    if bad:
        raise ConfigError(f"train: unknown fields {sorted(bad)}")
    quant_raw = train_raw.pop("quant", None) or {}
    if isinstance(quant_raw, QuantConfig):
        quant_raw = vars(quant_raw)
    base_quant = default_quant_config(dataset)
    try:
        quant = QuantConfig(**{"n": base_quant.n, "k": base_quant.k, **quant_raw})
    except (TypeError, ValueError) as exc:
        raise _sub("train.quant", exc) from None
    for key in ("early_stop_attack", "adv_attack"):
        if isinstance(train_raw.get(key), dict):
            try:
                train_raw[key] = ThreatModel(**train_raw[key])
            except (TypeError, ValueError) as exc:
                raise _sub(f"train.{key}", exc) from None
    train_raw.setdefault("seed", seed)
    mode = train_raw.pop("mode", "bpfc")
    try:
        train = TrainConfig.for_dataset(dataset, mode=mode, quant=quant, **train_raw)
    except (TypeError, ValueError) as exc:
        raise _sub("train", exc) from None

    eval_raw = dict(raw.get("evaluate") or {})
    bad = set(eval_raw) - {f.name for f in fields(EvaluateConfig)}
    if bad:
        raise ConfigError(f"evaluate: unknown fields {sorted(bad)}")
    evaluate = EvaluateConfig(**eval_raw)
    for suite in evaluate.suites:
        if suite not in SUITES:
            raise ConfigError(f"evaluate.suites: unknown suite {suite!r}; valid: {', '.join(SUITES)}")

    arch = raw.get("arch") or _DEFAULT_ARCH[dataset]
    from .models import ARCHS
    if arch not in ARCHS:
        raise ConfigError(f"arch: unknown architecture {arch!r}; valid: {', '.join(ARCHS)}")
    return ExperimentConfig(
        dataset=dataset, train=train, arch=arch, seed=seed,
        output_dir=str(raw.get("output_dir") or f"runs/{dataset}-{train.mode}"),
        data_root=raw.get("data_root"), evaluate=evaluate,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_config(raw)
