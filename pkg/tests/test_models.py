import numpy as np
import pytest
import torch
import torch.nn.functional as F

from bpfc.attacks import input_gradient
from bpfc.models import (build_m_lenet, build_model, build_net_a, build_small_resnet, load_checkpoint,
                         parameter_count, save_checkpoint)

from conftest import synthetic_images


def test_m_lenet_shapes_and_softmax():
    model = build_m_lenet().eval()
    x = torch.rand(4, 1, 28, 28)
    assert model(x).shape == (4, 10)
    assert torch.allclose(model.softmax(x).sum(1), torch.ones(4), atol=1e-6)
    assert model.conv(x).shape[1:] == (64, 1, 1)


def test_untrained_model_near_chance():
    data = synthetic_images(2000, seed=3).balanced_subset(1000, seed=0)
    torch.manual_seed(0)
    model = build_m_lenet().eval()
    with torch.no_grad():
        acc = (model(data.pixels).argmax(1).numpy() == data.labels).mean()
    assert acc == pytest.approx(0.1, abs=0.05)


def test_net_a_eval_is_deterministic():
    model = build_net_a()
    x = torch.rand(3, 1, 28, 28)
    assert model(x).shape == (3, 10)
    model.eval()
    assert torch.equal(model(x), model(x))


def test_resnet18_contract():
    model = build_small_resnet("resnet18").eval()
    assert parameter_count(model) == pytest.approx(11.17e6, rel=0.01)
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        logits = model(x)
    assert logits.shape == (2, 10)
    assert torch.equal((logits + 3.0).argmax(1), logits.argmax(1))
    with pytest.raises(ValueError):
        build_small_resnet("resnet50")


def test_unknown_arch():
    with pytest.raises(ValueError, match="m-lenet"):
        build_model("vgg19")


@pytest.mark.parametrize("arch", ["m-lenet", "net-a"])
def test_input_gradient_matches_finite_differences(arch):
    torch.manual_seed(1)
    model = build_model(arch).double().eval()
    x = torch.rand(2, 1, 28, 28, dtype=torch.float64) * 0.8 + 0.1
    y = torch.tensor([3, 7])
    grad = input_gradient(model, x, y)
    rng = np.random.default_rng(0)
    h = 1e-6
    for flat in rng.choice(x[0].numel(), 12, replace=False):
        idx = np.unravel_index(flat, x.shape[1:])
        e = torch.zeros_like(x)
        e[(slice(None), *idx)] = h
        with torch.no_grad():
            fd = (F.cross_entropy(model(x + e), y, reduction="sum")
                  - F.cross_entropy(model(x - e), y, reduction="sum")) / (2 * h)
        an = grad[(slice(None), *idx)].sum()
        assert abs(fd - an) <= 1e-3 * max(abs(an), 1e-4)


def test_checkpoint_roundtrip_and_arch_mismatch(tmp_path):
    model = build_m_lenet()
    path = save_checkpoint(tmp_path / "m.pt", model, "m-lenet", {"mode": "bpfc"})
    loaded, meta = load_checkpoint(path, "m-lenet")
    x = torch.rand(2, 1, 28, 28)
    assert torch.equal(loaded(x), model.eval()(x))
    assert meta["train_config"]["mode"] == "bpfc"
    with pytest.raises(ValueError, match="not net-a"):
        load_checkpoint(path, "net-a")
