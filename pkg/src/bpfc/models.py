"""Classifier architectures and checkpoint I/O.

Every model returns pre-softmax logits from ``forward``; ``softmax`` and
``predict`` are derived from them.

M-LeNet uses unpadded ("valid") 5x5 convolutions, so a 28x28 input shrinks
28 -> 24 -> 20 -> pool 10 -> 6 -> 2 -> pool 1 and FC(512) sees 64 features.
Net-A: 28 -> 24 -> 20, FC(128) sees 64 * 20 * 20 = 25600 features.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("m-lenet", "net-a", "resnet18")


class Classifier(nn.Module):
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10
    channels_last = True

    def features(self, x):
        raise NotImplementedError

    def forward(self, x):
        if self.channels_last:
            x = x.contiguous(memory_format=torch.channels_last)
        return self.features(x)

    def logits(self, x):
        return self(x)

    def softmax(self, x):
        return F.softmax(self(x).float(), dim=1)

    @torch.no_grad()
    def predict(self, x):
        return self(x).argmax(1)

    def init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        return self


class MLeNet(Classifier):
    def __init__(self, in_channels=1, num_classes=10):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = (in_channels, 28, 28)
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 32, 5), nn.ReLU(),
            nn.Conv2d(32, 32, 5), nn.ReLU(),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(32, 64, 5), nn.ReLU(),
            nn.Conv2d(64, 64, 5), nn.ReLU(),
            nn.MaxPool2d(2, 2),
        )
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(64, 512), nn.ReLU(), nn.Linear(512, num_classes))

    def features(self, x):
        return self.fc(self.conv(x))


class NetA(Classifier):
    def __init__(self, in_channels=1, num_classes=10):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = (in_channels, 28, 28)
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 64, 5), nn.ReLU(),
            nn.Conv2d(64, 64, 5), nn.ReLU(),
            nn.Dropout(0.25),
        )
        self.fc = nn.Sequential(
            nn.Flatten(), nn.Linear(64 * 20 * 20, 128), nn.ReLU(),
            nn.Dropout(0.5), nn.Linear(128, num_classes),
        )

    def features(self, x):
        return self.fc(self.conv(x))


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(Classifier):
    """ResNet-18 with a 3x3 stem for 32x32 inputs."""

    def __init__(self, num_classes=10):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = (3, 32, 32)
        self.stem = nn.Sequential(nn.Conv2d(3, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU())
        layers, in_planes = [], 64
        for planes, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
            layers += [BasicBlock(in_planes, planes, stride), BasicBlock(planes, planes, 1)]
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.head = nn.Linear(512, num_classes)

    def features(self, x):
        out = self.layers(self.stem(x))
        return self.head(F.adaptive_avg_pool2d(out, 1).flatten(1))


def _finish(model: Classifier) -> Classifier:
    model.init_weights()
    return model.to(memory_format=torch.channels_last)


def build_m_lenet(in_channels: int = 1) -> Classifier:
    return _finish(MLeNet(in_channels))


def build_net_a(in_channels: int = 1) -> Classifier:
    return _finish(NetA(in_channels))


def build_small_resnet(depth_tag: str = "resnet18") -> Classifier:
    if depth_tag != "resnet18":
        raise ValueError(f"unknown depth tag {depth_tag!r}; only 'resnet18' is provided")
    return _finish(ResNet18())


def build_model(arch: str) -> Classifier:
    arch = arch.lower()
    if arch == "m-lenet":
        return build_m_lenet()
    if arch == "net-a":
        return build_net_a()
    if arch == "resnet18":
        return build_small_resnet("resnet18")
    raise ValueError(f"unknown architecture {arch!r}; expected one of {', '.join(ARCHS)}")


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: Classifier, arch: str, train_config: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write parameters, the architecture tag and the producing config to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "arch": arch,
        "state_dict": {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()},
        "train_config": train_config or {},
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, arch: str | None = None) -> tuple[Classifier, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if arch is not None and arch.lower() != payload["arch"]:
        raise ValueError(f"checkpoint {path} holds a {payload['arch']} model, not {arch}")
    model = build_model(payload["arch"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
