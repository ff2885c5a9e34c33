import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from bpfc import attacks as A
from bpfc.attacks import AdaptiveLossWeights, ThreatModel
from bpfc.quantize import QuantConfig

from conftest import AffineBinary, Linear1D, TinyNet

Y0 = torch.tensor([0])


def scalar(v):
    return torch.tensor([[float(v)]], dtype=torch.float64)


class TinyImageNet(nn.Module):
    """Small conv net on 1x8x8 inputs, trained briefly in the fixture."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(1, 8, 3), nn.ReLU(), nn.Flatten(), nn.Linear(8 * 36, 4))

    def forward(self, x):
        return self.net(x)


@pytest.fixture(scope="module")
def trained_toy():
    gen = torch.Generator().manual_seed(0)
    y = torch.randint(0, 4, (256,), generator=gen)
    x = (torch.rand(256, 1, 8, 8, generator=gen) * 0.3 + y.view(-1, 1, 1, 1) * 0.2).clamp(0, 1)
    torch.manual_seed(0)
    model = TinyImageNet()
    opt = torch.optim.Adam(model.parameters(), 1e-2)
    for _ in range(200):
        opt.zero_grad()
        nn.functional.cross_entropy(model(x), y).backward()
        opt.step()
    return model.eval(), x, y


class TestThreatModel:
    def test_validation(self):
        with pytest.raises(ValueError, match="random_start"):
            ThreatModel(eps=0.1, restarts=3)
        with pytest.raises(ValueError):
            ThreatModel(eps=1.5)
        with pytest.raises(ValueError):
            ThreatModel(eps=0.1, restarts=0)
        with pytest.raises(ValueError):
            ThreatModel(eps=0.1, target_policy="sideways")
        with pytest.raises(ValueError):
            AdaptiveLossWeights(0, 0, 0)
        with pytest.raises(ValueError):
            AdaptiveLossWeights(1, -1, 0)

    def test_derive_seed_stable(self):
        assert A.derive_seed(0, "pgd", 3) == A.derive_seed(0, "pgd", 3)
        assert A.derive_seed(0, "pgd", 3) != A.derive_seed(0, "pgd", 4)


class TestLinearOracles:
    def test_fgsm_direction(self):
        out = A.fgsm(Linear1D(2.0), scalar(0.5), Y0, ThreatModel(eps=0.1))
        assert out.item() == pytest.approx(0.4)

    def test_fgsm_zero_gradient_and_zero_eps(self):
        assert A.fgsm(Linear1D(0.0), scalar(0.5), Y0, ThreatModel(eps=0.1)).item() == 0.5
        assert A.fgsm(Linear1D(2.0), scalar(0.5), Y0, ThreatModel(eps=0.0)).item() == 0.5

    @pytest.mark.parametrize("steps, step, eps", [(3, 0.02, 0.1), (10, 0.02, 0.1), (7, 0.05, 0.3)])
    def test_ifgsm_closed_form(self, steps, step, eps):
        x = 0.5
        out = A.ifgsm(Linear1D(), scalar(x), Y0, ThreatModel(eps=eps, eps_step=step, steps=steps))
        assert out.item() == pytest.approx(min(max(x - steps * step, x - eps), x + eps))

    def test_pgd_closed_form_from_random_start(self):
        x = torch.full((64, 1), 0.5, dtype=torch.float64)
        tm = ThreatModel(eps=0.2, eps_step=0.03, steps=4, random_start=True, seed=9)
        start = A._random_start(x, tm.eps, torch.Generator().manual_seed(A.derive_seed(9, "restart", 0)))
        res = A.pgd(Linear1D(), x, torch.zeros(64, dtype=torch.long), tm)
        expected = torch.maximum(start - 4 * 0.03, x - 0.2)
        assert torch.allclose(res.x_adv, expected)

    def test_deepfool_hyperplane_distance(self):
        w = torch.tensor([0.6, -0.8, 0.3, 0.5], dtype=torch.float64)
        model = AffineBinary(w, -0.05)
        x = torch.tensor([[0.6, 0.3, 0.5, 0.4]], dtype=torch.float64)
        dist = abs((x @ w).item() - 0.05) / w.norm().item()
        res = A.deepfool(model, x, max_steps=50, num_classes=2)
        assert res.fooled.all()
        assert res.l2.item() == pytest.approx(dist, rel=0.05)

    def test_cw_hyperplane_distance(self):
        w = torch.tensor([0.6, -0.8, 0.3, 0.5], dtype=torch.float64)
        model = AffineBinary(w, -0.05)
        x = torch.tensor([[0.6, 0.3, 0.5, 0.4]], dtype=torch.float64)
        dist = abs((x @ w).item() - 0.05) / w.norm().item()
        res = A.cw_l2(model, x, torch.tensor([0]), search_steps=9, max_iter=200, lr=0.01, num_classes=2)
        assert res.fooled.all()
        assert res.l2.item() == pytest.approx(dist, rel=0.10)

    def test_spsa_gradient_sign(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.full((1, 6), 0.5, dtype=torch.float64)
        model = Linear1D()
        est = A.spsa_gradient(lambda z: A.margin_loss(model(z), torch.zeros(z.shape[0], dtype=torch.long)),
                              x, 0.01, 512, gen)
        assert (est.sign() == 1).all()


class TestDegeneracies:
    def test_ifgsm_single_step_is_fgsm(self, trained_toy):
        model, x, y = trained_toy
        a = A.fgsm(model, x, y, ThreatModel(eps=0.1))
        b = A.ifgsm(model, x, y, ThreatModel(eps=0.1, eps_step=0.1, steps=1))
        c = A.mi_fgsm(model, x, y, ThreatModel(eps=0.1, eps_step=0.1, steps=1))
        assert torch.equal(a, b) and torch.equal(a, c)

    def test_pgd_without_random_start_is_ifgsm(self, trained_toy):
        model, x, y = trained_toy
        tm = ThreatModel(eps=0.1, eps_step=0.02, steps=5)
        assert torch.equal(A.pgd(model, x, y, tm).x_adv, A.ifgsm(model, x, y, tm))

    def test_mi_fgsm_zero_decay_matches_ifgsm(self, trained_toy):
        model, x, y = trained_toy
        tm = ThreatModel(eps=0.1, eps_step=0.02, steps=5)
        assert torch.equal(A.mi_fgsm(model, x, y, tm, decay=0.0), A.ifgsm(model, x, y, tm))

    def test_adaptive_ce_only_is_pgd(self, trained_toy):
        model, x, y = trained_toy
        tm = ThreatModel(eps=0.1, eps_step=0.02, steps=5, restarts=2, random_start=True, seed=3)
        pgd = A.pgd(model, x, y, tm)
        ada = A.adaptive_attack(model, x, y, tm, AdaptiveLossWeights(1, 0, 0), QuantConfig(n=8, k=5))
        assert torch.equal(pgd.x_adv, ada.x_adv) and torch.equal(pgd.correct, ada.correct)


class TestRestarts:
    def test_worst_case_mask(self):
        res = A.RestartResult(None, torch.tensor([[True, True, False], [True, False, False]]))
        assert res.accuracy == pytest.approx(1 / 3)

    def test_monotone_in_restarts_and_prefix_consistent(self, trained_toy):
        model, x, y = trained_toy
        tm = ThreatModel(eps=0.15, eps_step=0.03, steps=3, restarts=6, random_start=True, seed=1)
        full = A.pgd(model, x, y, tm)
        accs = [full.correct[:r].all(0).float().mean().item() for r in range(1, 7)]
        assert accs == sorted(accs, reverse=True)
        short = A.pgd(model, x, y, tm.with_(restarts=3))
        assert torch.equal(short.correct, full.correct[:3])

    def test_skip_broken_keeps_mask(self, trained_toy):
        model, x, y = trained_toy
        tm = ThreatModel(eps=0.15, eps_step=0.03, steps=3, restarts=4, random_start=True, seed=2)
        a = A.pgd(model, x, y, tm, skip_broken=True).worst_case_correct
        b = A.pgd(model, x, y, tm, skip_broken=False).worst_case_correct
        assert torch.equal(a, b)


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(0, 0.5), step=st.floats(0, 0.2), steps=st.integers(1, 4), seed=st.integers(0, 1000),
       attack=st.sampled_from(["fgsm", "ifgsm", "pgd", "mifgsm", "spsa", "pgd-targeted"]))
def test_ball_containment(eps, step, steps, seed, attack):
    torch.manual_seed(seed)
    model = TinyNet(d_in=16, classes=4, seed=seed)
    x = torch.rand(8, 1, 4, 4, dtype=torch.float64)
    y = torch.randint(0, 4, (8,))
    tm = ThreatModel(eps=eps, eps_step=step, steps=steps, random_start=True, seed=seed)
    if attack == "fgsm":
        adv = A.fgsm(model, x, y, tm)
    elif attack == "ifgsm":
        adv = A.ifgsm(model, x, y, tm)
    elif attack == "pgd":
        adv = A.pgd(model, x, y, tm).x_adv
    elif attack == "mifgsm":
        adv = A.mi_fgsm(model, x, y, tm)
    elif attack == "spsa":
        adv = A.spsa(model, x, y, tm, n_samples=8, iters=2)
    else:
        targets = (y + 1) % 4
        adv = A.pgd_targeted(model, x, y, tm.with_(target_policy="fixed"), targets=targets).x_adv
    assert (adv - x).abs().max() <= eps + 1e-9
    assert adv.min() >= 0 and adv.max() <= 1


def test_determinism(trained_toy):
    model, x, y = trained_toy
    tm = ThreatModel(eps=0.1, eps_step=0.02, steps=4, restarts=2, random_start=True, seed=11)
    assert torch.equal(A.pgd(model, x, y, tm).x_adv, A.pgd(model, x, y, tm).x_adv)
    assert torch.equal(A.spsa(model, x, y, tm, n_samples=16, iters=2), A.spsa(model, x, y, tm, n_samples=16, iters=2))


def test_strength_ordering(trained_toy):
    model, x, y = trained_toy
    base = ThreatModel(eps=0.12, eps_step=0.02)
    with torch.no_grad():
        acc = lambda adv: (model(adv).argmax(1) == y).float().mean().item()  # noqa: E731
    fg = acc(A.fgsm(model, x, y, base))
    it = acc(A.ifgsm(model, x, y, base.with_(steps=7)))
    pg = A.pgd(model, x, y, base.with_(steps=20, random_start=True)).accuracy
    assert pg <= it <= fg


def test_targeted_policies(trained_toy):
    model, x, y = trained_toy
    with torch.no_grad():
        ll = model(x).argmin(1)
    assert torch.equal(A.choose_targets(model, x, y, "least_likely"), ll)
    rnd = A.choose_targets(model, x, y, "random_target", seed=4, num_classes=4)
    assert (rnd != y).all() and len(set(rnd.tolist())) > 1
    tm = ThreatModel(eps=0.1, eps_step=0.02, steps=10, random_start=True, target_policy="least_likely")
    res = A.pgd_targeted(model, x, y, tm)
    untargeted = A.pgd(model, x, y, tm.with_(target_policy="untargeted"))
    assert res.accuracy >= untargeted.accuracy
    with pytest.raises(ValueError):
        A.pgd_targeted(model, x, y, tm.with_(target_policy="untargeted"))


def test_deepfool_misclassified_input_untouched(trained_toy):
    model, x, y = trained_toy
    with torch.no_grad():
        wrong = (y + 1) % 4
    res = A.deepfool(model, x[:8], y=wrong[:8], num_classes=4)
    assert res.fooled.all()
    assert torch.count_nonzero(res.l2[~res.initially_correct]) == 0


def test_random_noise(trained_toy):
    model, x, y = trained_toy
    with torch.no_grad():
        clean = model(x).argmax(1) == y
    assert torch.equal(A.random_noise_attack(model, x, y, ThreatModel(eps=0.0), 5), clean)
    tm = ThreatModel(eps=0.2, seed=3)
    few = A.random_noise_attack(model, x, y, tm, 20)
    many = A.random_noise_attack(model, x, y, tm, 200)
    assert many.float().mean() <= few.float().mean()
    assert A.pgd(model, x, y, tm.with_(eps_step=0.02, steps=20, random_start=True)).accuracy <= many.float().mean()


def test_lsb_term_shrinks_lsb_norm(trained_toy):
    model, x, y = trained_toy
    quant = QuantConfig(n=8, k=5)
    tm = ThreatModel(eps=0.1, eps_step=0.01, steps=20, random_start=True, seed=0)
    pgd = A.pgd(model, x, y, tm).x_adv
    lsb = A.adaptive_attack(model, x, y, tm, AdaptiveLossWeights(0, 0, 1), quant).x_adv
    assert A.lsb_norm(lsb, quant, seed=1).mean() < A.lsb_norm(pgd, quant, seed=1).mean()


def test_bf16_gradients_stay_in_ball(trained_toy):
    model, x, y = trained_toy
    tm = ThreatModel(eps=0.1, eps_step=0.02, steps=5, random_start=True, grad_precision="bf16")
    res = A.pgd(model, x, y, tm)
    assert (res.x_adv - x).abs().max() <= 0.1 + 1e-6
    assert res.x_adv.dtype == x.dtype
    assert math.isfinite(res.accuracy)
