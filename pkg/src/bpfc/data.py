"""Dataset ingestion and canonical splits.

Images are kept as raw 8-bit arrays and converted to float pixels in [0, 1]
(value / 255) only when a batch is drawn, so the 8-bit integers can always be
recovered exactly. No mean/std standardization is applied anywhere: attacks,
the quantizer and the models all see [0, 1] inputs.
"""

from __future__ import annotations

import gzip
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .attacks import ThreatModel
from .quantize import QuantConfig

VAL_SIZE = 10_000

_ALIASES = {
    "mnist": "mnist",
    "f-mnist": "fmnist",
    "fmnist": "fmnist",
    "fashion-mnist": "fmnist",
    "fashion_mnist": "fmnist",
    "cifar-10": "cifar10",
    "cifar10": "cifar10",
}

_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(Exception):
    """Raised for unknown dataset names and missing or corrupt raw files."""


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    if key not in _ALIASES:
        raise DatasetError(f"unknown dataset {name!r}; expected one of mnist, fmnist, cifar10")
    return _ALIASES[key]


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # (B, C, H, W) float in [0, 1]
    labels: torch.Tensor  # (B,) int64

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (B, C, H, W), got {tuple(self.pixels.shape)}")
        if self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError("pixels and labels disagree on batch size")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class ImageSet:
    """An indexed slice of a dataset split, stored as raw 8-bit images."""

    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    indices: np.ndarray  # positions in the raw source split

    def __len__(self):
        return len(self.labels)

    @property
    def pixels(self) -> torch.Tensor:
        return torch.from_numpy(self.images).float().div_(255.0)

    def as_batch(self) -> ImageBatch:
        return ImageBatch(self.pixels, torch.from_numpy(self.labels))

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.labels[idx], self.indices[idx])

    def head(self, n: int | None) -> "ImageSet":
        if n is None or n >= len(self):
            return self
        return self.subset(np.arange(n))

    def class_histogram(self, num_classes: int = 10) -> list[int]:
        return np.bincount(self.labels, minlength=num_classes).tolist()

    def balanced_subset(self, n: int, seed: int, num_classes: int = 10) -> "ImageSet":
        """Stratified sample with ``n // num_classes`` images per class."""
        if n % num_classes:
            raise ValueError("balanced subset size must be a multiple of the class count")
        rng = np.random.default_rng(seed)
        per_class = n // num_classes
        picks = []
        for c in range(num_classes):
            members = np.flatnonzero(self.labels == c)
            if len(members) < per_class:
                raise ValueError(f"class {c} has only {len(members)} samples, need {per_class}")
            picks.append(np.sort(rng.choice(members, per_class, replace=False)))
        return self.subset(np.sort(np.concatenate(picks)))

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0,
                augment: bool = False) -> Iterator[ImageBatch]:
        """Yield batches; with ``shuffle`` the order depends only on ``seed``."""
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng(seed).permutation(len(self))
        gen = torch.Generator().manual_seed(seed) if augment else None
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            x = torch.from_numpy(self.images[sel]).float().div_(255.0)
            if augment:
                x = _crop_flip(x, gen)
            yield ImageBatch(x, torch.from_numpy(self.labels[sel]))


def _crop_flip(x: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    b, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    dx = torch.randint(0, 2 * pad + 1, (b,), generator=gen)
    flip = torch.rand(b, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(b):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


@dataclass
class DatasetSpec:
    name: str
    bit_depth: int
    class_count: int
    split_sizes: tuple[int, int, int]
    default_threat: ThreatModel
    default_quant: QuantConfig
    val_class_histogram: list[int] = field(default_factory=list)


# (eps, eps_step, whitebox step counts, k)
_DEFAULTS = {
    "mnist": (0.3, 0.01, (40, 100, 1000), 7),
    "fmnist": (0.1, 0.01, (40, 100, 1000), 6),
    "cifar10": (8 / 255, 2 / 255, (7, 20, 1000), 5),
}

_SPLIT_SIZES = {
    "mnist": (50_000, 10_000, 10_000),
    "fmnist": (50_000, 10_000, 10_000),
    "cifar10": (40_000, 10_000, 10_000),
}


def default_threat_model(name: str) -> ThreatModel:
    """Evaluation budget for a dataset; ``steps`` is the small white-box step count."""
    eps, eps_step, steps, _ = _DEFAULTS[canonical_name(name)]
    return ThreatModel(eps=eps, eps_step=eps_step, steps=steps[0])


def default_step_counts(name: str) -> tuple[int, int, int]:
    return _DEFAULTS[canonical_name(name)][2]


def default_cw_params(name: str) -> dict:
    """C&W settings: 500 iterations on the MNIST-like sets, 200 on CIFAR-10."""
    return {"search_steps": 9, "max_iter": 200 if canonical_name(name) == "cifar10" else 500, "lr": 0.01}


def default_quant_config(name: str) -> QuantConfig:
    return QuantConfig(n=8, k=_DEFAULTS[canonical_name(name)][3])


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get("BPFC_DATA_ROOT", "data"))


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DatasetError(f"missing raw file {path} (or {gz.name})")


def read_idx(path: Path) -> np.ndarray:
    """Read an IDX (MNIST-format) file, optionally gzip-compressed."""
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise DatasetError(f"{path}: not an unsigned-byte IDX file")
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    if len(data) - offset != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes, found {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims)


def _load_idx_dataset(folder: Path):
    out = {}
    for split, (img_name, lbl_name) in _IDX_FILES.items():
        images = read_idx(folder / img_name)
        labels = read_idx(folder / lbl_name)
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(f"{folder}: {split} image/label count mismatch")
        out[split] = (images[:, None, :, :].copy(), labels.astype(np.int64))
    return out


def _load_cifar10(folder: Path):
    def read_batches(names):
        xs, ys = [], []
        for name in names:
            path = folder / name
            if not path.exists():
                raise DatasetError(f"missing raw file {path}")
            try:
                with open(path, "rb") as fh:
                    entry = pickle.load(fh, encoding="bytes")
                xs.append(np.asarray(entry[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
                ys.append(np.asarray(entry[b"labels"], dtype=np.int64))
            except (pickle.UnpicklingError, KeyError, ValueError, EOFError) as exc:
                raise DatasetError(f"{path}: corrupt CIFAR-10 batch ({exc})") from exc
        return np.concatenate(xs), np.concatenate(ys)

    return {
        "train": read_batches([f"data_batch_{i}" for i in range(1, 6)]),
        "test": read_batches(["test_batch"]),
    }


_FOLDERS = {"mnist": "mnist", "fmnist": "fashion-mnist", "cifar10": "cifar-10-batches-py"}


def load_dataset(name: str, seed: int = 0, root: str | os.PathLike | None = None):
    """Load a dataset and split it into train/validation/test.

    The training split is shuffled with ``seed`` and its last 10000 images
    form the validation set. The test split never depends on the seed.

    Returns ``(train, val, test, spec)`` where the first three are
    :class:`ImageSet` objects.
    """
    key = canonical_name(name)
    folder = data_root(root) / _FOLDERS[key]
    raw = _load_cifar10(folder) if key == "cifar10" else _load_idx_dataset(folder)

    train_x, train_y = raw["train"]
    test_x, test_y = raw["test"]
    expected = _SPLIT_SIZES[key]
    if len(train_y) != expected[0] + expected[1] or len(test_y) != expected[2]:
        raise DatasetError(
            f"{key}: expected {expected[0] + expected[1]} train / {expected[2]} test images, "
            f"found {len(train_y)} / {len(test_y)}")
    if train_y.min() < 0 or train_y.max() >= 10 or test_y.min() < 0 or test_y.max() >= 10:
        raise DatasetError(f"{key}: labels outside [0, 10)")

    perm = np.random.default_rng(seed).permutation(len(train_y))
    train_idx, val_idx = perm[:-VAL_SIZE], perm[-VAL_SIZE:]
    train = ImageSet(train_x[train_idx], train_y[train_idx], train_idx)
    val = ImageSet(train_x[val_idx], train_y[val_idx], val_idx)
    test = ImageSet(test_x, test_y, np.arange(len(test_y)))

    eps, eps_step, steps, k = _DEFAULTS[key]
    spec = DatasetSpec(
        name=key,
        bit_depth=8,
        class_count=10,
        split_sizes=(len(train), len(val), len(test)),
        default_threat=ThreatModel(eps=eps, eps_step=eps_step, steps=steps[0]),
        default_quant=QuantConfig(n=8, k=k),
        val_class_histogram=val.class_histogram(),
    )
    return train, val, test, spec
