import pickle

import numpy as np
import pytest
import torch
from torch import nn

from bpfc.data import ImageSet, data_root


class Linear1D(nn.Module):
    """g(x) = [a * sum(x), -a * sum(x)]; with y = 0 the loss falls as x grows."""

    def __init__(self, a=1.0):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(float(a), dtype=torch.float64))

    def forward(self, x):
        z = self.a * x.flatten(1).sum(1, keepdim=True)
        return torch.cat([z, -z], 1)


class AffineBinary(nn.Module):
    """Two logits [w.x + b, 0]; the decision boundary is the hyperplane w.x + b = 0."""

    def __init__(self, w, b):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(float(b), dtype=torch.float64))

    def forward(self, x):
        z = x.flatten(1) @ self.w + self.b
        return torch.stack([z, torch.zeros_like(z)], 1)


class TinyNet(nn.Module):
    """Two smooth layers; small enough for finite differences in float64."""

    def __init__(self, d_in=16, hidden=8, classes=3, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.fc1 = nn.Linear(d_in, hidden).double()
        self.fc2 = nn.Linear(hidden, classes).double()

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


def synthetic_images(n, shape=(1, 28, 28), classes=10, seed=0):
    """Noisy uint8 images with a bright square whose position encodes the class."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    imgs = rng.normal(40, 20, (n, *shape))
    h, w = shape[1:]
    for i, c in enumerate(labels):
        r, col = divmod(int(c), 4)
        top, left = 2 + r * (h - 6) // 3, 2 + col * (w - 6) // 4
        imgs[i, :, top:top + 6, left:left + 6] += 180
    return ImageSet(np.clip(imgs, 0, 255).astype(np.uint8), labels.astype(np.int64), np.arange(n))


def write_synthetic_cifar(root, seed=0, per_batch=10000):
    """Random images in the CIFAR-10 python pickle layout (five train batches plus test)."""
    folder = root / "cifar-10-batches-py"
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        labels = rng.integers(0, 10, per_batch)
        data = rng.integers(0, 256, (per_batch, 3072), dtype=np.uint8)
        with open(folder / name, "wb") as fh:
            pickle.dump({b"data": data, b"labels": labels.tolist()}, fh)
    return folder


def mnist_available():
    root = data_root()
    return (root / "mnist").is_dir() and any((root / "mnist").iterdir())


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST files not found under the data root")


@pytest.fixture
def toy_images():
    return synthetic_images(256)


# One summary line per acceptance criterion, filled by test_acceptance.py.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
