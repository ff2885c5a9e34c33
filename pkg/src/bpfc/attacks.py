"""White-box, transfer, gradient-free and adaptive attacks under an l_inf budget.

All bounded attacks keep their iterates inside ``{x' : |x' - x|_inf <= eps}``
intersected with ``[0, 1]``. Sign-gradient steps use ``sign(0) = 0``. Models
are switched to eval mode with frozen parameters for the duration of an
attack and restored afterwards.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .quantize import QuantConfig, quantize_ste, _quantize

TARGET_POLICIES = ("untargeted", "least_likely", "random_target", "fixed")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    eps: float
    eps_step: float = 0.01
    steps: int = 40
    restarts: int = 1
    random_start: bool = False
    target_policy: str = "untargeted"
    seed: int = 0
    # "bf16" computes attack gradients under autocast; correctness is always judged in fp32
    grad_precision: str = "fp32"

    def __post_init__(self):
        if not 0 <= self.eps <= 1:
            raise ValueError(f"eps must lie in [0, 1], got {self.eps}")
        if self.eps_step < 0:
            raise ValueError("eps_step must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.restarts > 1 and not self.random_start:
            raise ValueError("restarts > 1 requires random_start=True")
        if self.target_policy not in TARGET_POLICIES:
            raise ValueError(f"target_policy must be one of {TARGET_POLICIES}")
        if self.grad_precision not in ("fp32", "bf16"):
            raise ValueError("grad_precision must be 'fp32' or 'bf16'")

    @property
    def bf16(self) -> bool:
        return self.grad_precision == "bf16"

    def with_(self, **changes) -> "ThreatModel":
        return replace(self, **changes)


@dataclass(frozen=True)
class AdaptiveLossWeights:
    ce: float = 1.0
    g: float = 0.0
    lsb: float = 0.0

    def __post_init__(self):
        if min(self.ce, self.g, self.lsb) < 0:
            raise ValueError("adaptive loss weights must be nonnegative")
        if self.ce == self.g == self.lsb == 0:
            raise ValueError("at least one adaptive loss weight must be nonzero")


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode()[:8].ljust(8, b"\0"), "little")
            for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(2, np.uint64)[0] >> np.uint64(1))


@contextlib.contextmanager
def frozen(model: torch.nn.Module):
    """Eval mode and no parameter gradients; previous state restored on exit."""
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
        model.train(was_training)


def project(x_adv: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.max(torch.min(x_adv, x + eps), x - eps).clamp(0.0, 1.0)


def upcast(t: torch.Tensor) -> torch.Tensor:
    """Half-precision logits to float32; float32/float64 pass through."""
    return t.float() if t.dtype in (torch.bfloat16, torch.float16) else t


def _ce(model, x_adv, y):
    return F.cross_entropy(upcast(model(x_adv)), y, reduction="none")


def input_gradient(model, x, y):
    """Gradient of the summed cross-entropy with respect to the input."""
    with frozen(model):
        return _input_grad(lambda z: _ce(model, z, y), x)


def _input_grad(loss_fn, x_adv, bf16=False):
    x_adv = x_adv.detach().requires_grad_(True)
    with torch.autocast("cpu", dtype=torch.bfloat16, enabled=bf16):
        loss = loss_fn(x_adv)
    (grad,) = torch.autograd.grad(loss.sum(), x_adv)
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite input gradient")
    return grad


def _sign_steps(loss_fn, x, start, eps, eps_step, steps, descend=False, decay=None, bf16=False):
    """Projected sign-gradient iterations; ``decay`` switches on momentum."""
    x_adv = start.detach().clone()
    momentum = torch.zeros_like(x)
    direction = -1.0 if descend else 1.0
    for _ in range(steps):
        grad = _input_grad(loss_fn, x_adv, bf16)
        if decay is not None:
            l1 = grad.abs().flatten(1).sum(1).clamp_min(1e-12).view(-1, *[1] * (x.ndim - 1))
            momentum = decay * momentum + grad / l1
            grad = momentum
        x_adv = project(x_adv + direction * eps_step * grad.sign(), x, eps).detach()
    return x_adv


def _random_start(x, eps, gen):
    noise = (2 * torch.rand(x.shape, generator=gen, dtype=x.dtype) - 1) * eps
    return (x + noise).clamp(0.0, 1.0)


@torch.no_grad()
def _correct(model, x, y):
    return model(x).argmax(1) == y


def fgsm(model, x, y, tm: ThreatModel):
    """Single signed-gradient step of size ``eps`` on the cross-entropy."""
    with frozen(model):
        grad = _input_grad(lambda z: _ce(model, z, y), x, tm.bf16)
        return (x + tm.eps * grad.sign()).clamp(0.0, 1.0).detach()


def ifgsm(model, x, y, tm: ThreatModel):
    """Iterative FGSM from the clean point (no random start)."""
    with frozen(model):
        return _sign_steps(lambda z: _ce(model, z, y), x, x, tm.eps, tm.eps_step, tm.steps, bf16=tm.bf16)


def mi_fgsm(model, x, y, tm: ThreatModel, decay: float = 1.0):
    """Momentum iterative FGSM; gradients are l1-normalized per sample before accumulation."""
    if decay < 0:
        raise ValueError("decay must be nonnegative")
    with frozen(model):
        return _sign_steps(lambda z: _ce(model, z, y), x, x, tm.eps, tm.eps_step, tm.steps,
                           decay=decay, bf16=tm.bf16)


@dataclass
class RestartResult:
    """Outcome of a multi-restart attack.

    ``correct[r, i]`` says whether sample ``i`` was still classified correctly
    after restart ``r`` (``True`` for restarts skipped because the sample had
    already been broken). ``x_adv`` holds, per sample, the first restart output
    that broke it, or the last restart output otherwise.
    """

    x_adv: torch.Tensor
    correct: torch.Tensor
    per_restart: list = field(default_factory=list)

    @property
    def worst_case_correct(self) -> torch.Tensor:
        return self.correct.all(0)

    @property
    def accuracy(self) -> float:
        return self.worst_case_correct.float().mean().item()


def _restarts(model, x, y, tm, loss_for, still_correct, keep_all=False, skip_broken=True):
    n = x.shape[0]
    correct = torch.ones(tm.restarts, n, dtype=torch.bool)
    alive = torch.ones(n, dtype=torch.bool)
    best = x.clone()
    outputs = []
    for r in range(tm.restarts):
        idx = alive.nonzero().squeeze(1) if skip_broken else torch.arange(n)
        if len(idx) == 0:
            break
        xs, ys = x[idx], y[idx]
        gen = torch.Generator().manual_seed(derive_seed(tm.seed, "restart", r))
        start = _random_start(x, tm.eps, gen)[idx] if tm.random_start else xs
        adv = _sign_steps(loss_for(idx, r), xs, start, tm.eps, tm.eps_step, tm.steps,
                          descend=tm.target_policy != "untargeted", bf16=tm.bf16)
        ok = still_correct(adv, ys)
        correct[r, idx] = ok
        fresh = alive[idx]
        best[idx[fresh]] = adv[fresh]
        if keep_all:
            full = x.clone()
            full[idx] = adv
            outputs.append(full)
        alive[idx[~ok]] = False
    return RestartResult(best, correct, outputs)


def pgd(model, x, y, tm: ThreatModel, keep_all: bool = False, skip_broken: bool = True):
    """Untargeted PGD with ``tm.restarts`` random restarts and worst-case aggregation.

    A sample counts as robust only if it survives every restart. Once a
    sample is broken its remaining restarts are skipped (``skip_broken``);
    this cannot change the worst-case mask.
    """
    with frozen(model):
        return _restarts(
            model, x, y, tm,
            loss_for=lambda idx, r: (lambda z: _ce(model, z, y[idx])),
            still_correct=lambda adv, ys: _correct(model, adv, ys),
            keep_all=keep_all, skip_broken=skip_broken)


def choose_targets(model, x, y, policy: str, seed: int = 0, num_classes: int = 10):
    if policy == "least_likely":
        with frozen(model), torch.no_grad():
            return model(x).argmin(1)
    if policy == "random_target":
        gen = torch.Generator().manual_seed(derive_seed(seed, "targets"))
        offset = torch.randint(1, num_classes, y.shape, generator=gen)
        return (y + offset) % num_classes
    raise ValueError(f"no automatic targets for policy {policy!r}")


@dataclass
class TargetedResult:
    x_adv: torch.Tensor
    targets: torch.Tensor
    hit_target: torch.Tensor
    correct: torch.Tensor

    @property
    def accuracy(self) -> float:
        return self.correct.float().mean().item()

    @property
    def success_rate(self) -> float:
        return self.hit_target.float().mean().item()


def pgd_targeted(model, x, y, tm: ThreatModel, targets: torch.Tensor | None = None):
    """Targeted PGD: descend the cross-entropy toward a target class.

    Accuracy is the fraction of samples still predicted as their true label
    after every restart.
    """
    if tm.target_policy == "untargeted":
        raise ValueError("pgd_targeted needs target_policy least_likely, random_target or fixed")
    if targets is None:
        if tm.target_policy == "fixed":
            raise ValueError("target_policy 'fixed' requires explicit targets")
        targets = choose_targets(model, x, y, tm.target_policy, tm.seed)
    if tm.target_policy == "random_target" and (targets == y).any():
        raise ValueError("random targets must differ from the true label")
    with frozen(model):
        res = _restarts(
            model, x, y, tm,
            loss_for=lambda idx, r: (lambda z: _ce(model, z, targets[idx])),
            still_correct=lambda adv, ys: _correct(model, adv, ys))
        with torch.no_grad():
            pred = model(res.x_adv).argmax(1)
    return TargetedResult(res.x_adv, targets, pred == targets, res.worst_case_correct)


@dataclass
class UnboundedResult:
    """Minimal-perturbation attack output.

    ``fooled`` marks samples whose prediction differs from the reference
    label. ``l2`` is the per-sample perturbation norm (zero where unfooled).
    ``mean_l2`` averages over samples that were initially correct and got
    fooled; it is None when there are none.
    """

    x_adv: torch.Tensor
    fooled: torch.Tensor
    l2: torch.Tensor
    initially_correct: torch.Tensor

    @property
    def fooling_rate(self) -> float:
        return self.fooled.float().mean().item()

    @property
    def mean_l2(self) -> float | None:
        sel = self.fooled & self.initially_correct
        return self.l2[sel].mean().item() if sel.any() else None


def deepfool(model, x, max_steps: int = 100, y: torch.Tensor | None = None,
             overshoot: float = 0.02, num_classes: int = 10) -> UnboundedResult:
    """Multi-class DeepFool (l2).

    Without ``y`` the reference label is the clean prediction. With ``y``,
    inputs already misclassified are reported fooled with zero perturbation.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    with frozen(model):
        with torch.no_grad():
            pred0 = model(x).argmax(1)
        ref = pred0 if y is None else y
        initially = pred0 == ref
        r_tot = torch.zeros_like(x)
        x_adv = x.clone()
        active = initially.clone()
        for _ in range(max_steps):
            idx = active.nonzero().squeeze(1)
            if len(idx) == 0:
                break
            xa = x_adv[idx].detach().requires_grad_(True)
            logits = upcast(model(xa))
            grads = torch.stack([torch.autograd.grad(logits[:, c].sum(), xa, retain_graph=c < num_classes - 1)[0]
                                 for c in range(num_classes)], 1)
            logits = logits.detach()
            k0 = ref[idx]
            rows = torch.arange(len(idx))
            w = grads - grads[rows, k0].unsqueeze(1)
            f = logits - logits[rows, k0].unsqueeze(1)
            wnorm = w.flatten(2).norm(dim=2)
            ratio = f.abs() / wnorm.clamp_min(1e-12)
            ratio[rows, k0] = float("inf")
            best = ratio.argmin(1)
            dist = ratio[rows, best]
            wb = w[rows, best]
            step = (dist + 1e-4).view(-1, *[1] * (x.ndim - 1)) * wb / wnorm[rows, best].clamp_min(1e-12).view(
                -1, *[1] * (x.ndim - 1))
            r_tot[idx] += step
            x_adv[idx] = (x[idx] + (1 + overshoot) * r_tot[idx]).clamp(0.0, 1.0)
            with torch.no_grad():
                now = model(x_adv[idx]).argmax(1)
            active[idx[now != k0]] = False
        with torch.no_grad():
            fooled = model(x_adv).argmax(1) != ref
        fooled |= ~initially
        l2 = (x_adv - x).flatten(1).norm(dim=1)
        l2[~fooled] = 0.0
    return UnboundedResult(x_adv.detach(), fooled, l2, initially)


def cw_l2(model, x, y, search_steps: int = 9, max_iter: int = 200, lr: float = 0.01,
          initial_const: float = 1e-3, confidence: float = 0.0, num_classes: int = 10) -> UnboundedResult:
    """Carlini-Wagner l2 attack with per-sample binary search over the trade-off constant."""
    if search_steps < 1 or max_iter < 1 or lr <= 0:
        raise ValueError("search_steps, max_iter and lr must be positive")
    with frozen(model):
        with torch.no_grad():
            initially = model(x).argmax(1) == y
        n = x.shape[0]
        lower = torch.zeros(n, dtype=torch.float64)
        upper = torch.full((n,), 1e10, dtype=torch.float64)
        const = torch.full((n,), initial_const, dtype=torch.float64)
        best_l2 = torch.full((n,), float("inf"), dtype=x.dtype)
        best_adv = x.clone()
        onehot = F.one_hot(y, num_classes).bool()
        w0 = torch.atanh((2 * x - 1).clamp(-1 + 1e-6, 1 - 1e-6))
        for _ in range(search_steps):
            w = w0.clone().requires_grad_(True)
            opt = torch.optim.Adam([w], lr=lr)
            succeeded = torch.zeros(n, dtype=torch.bool)
            c = const.to(x.dtype)
            for _ in range(max_iter):
                adv = (torch.tanh(w) + 1) / 2
                logits = upcast(model(adv))
                real = logits[onehot]
                other = logits.masked_fill(onehot, -float("inf")).max(1).values
                margin = torch.clamp(real - other, min=-confidence)
                dist = (adv - x).flatten(1).pow(2).sum(1)
                loss = (dist + c * margin).sum()
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    adv_d = adv.detach()
                    hit = (real - other) < -confidence if confidence > 0 else logits.argmax(1) != y
                    l2 = dist.detach().sqrt()
                    better = hit & (l2 < best_l2)
                    best_l2 = torch.where(better, l2, best_l2)
                    best_adv[better] = adv_d[better]
                    succeeded |= hit
            upper = torch.where(succeeded, torch.minimum(upper, const), upper)
            lower = torch.where(succeeded, lower, torch.maximum(lower, const))
            const = torch.where(upper < 1e9, (lower + upper) / 2, const * 10)
        fooled = torch.isfinite(best_l2) | ~initially
        l2 = torch.where(torch.isfinite(best_l2), best_l2, torch.zeros_like(best_l2))
        best_adv[~initially] = x[~initially]
        l2[~initially] = 0.0
    return UnboundedResult(best_adv, fooled, l2, initially)


def margin_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """True-class logit minus the best other logit (positive = correctly classified)."""
    onehot = F.one_hot(y, logits.shape[1]).bool()
    real = logits[onehot]
    other = logits.masked_fill(onehot, -float("inf")).max(1).values
    return real - other


def spsa_gradient(loss_fn, x: torch.Tensor, delta: float, n_samples: int, gen: torch.Generator,
                  chunk: int = 128) -> torch.Tensor:
    """Per-sample SPSA estimate of d loss / d x from Rademacher directions.

    ``loss_fn`` maps a (B, ...) batch to (B,) losses.
    """
    est = torch.zeros_like(x)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        v = torch.randint(0, 2, (m, *x.shape), generator=gen).to(x.dtype) * 2 - 1
        plus = (x.unsqueeze(0) + delta * v).flatten(0, 1)
        minus = (x.unsqueeze(0) - delta * v).flatten(0, 1)
        diff = (loss_fn(plus) - loss_fn(minus)).view(m, x.shape[0], *[1] * (x.ndim - 1))
        est += (diff / (2 * delta) * v).sum(0)
        done += m
    return est / n_samples


def spsa(model, x, y, tm: ThreatModel, delta: float = 0.01, lr: float = 0.01,
         n_samples: int = 128, iters: int = 5, chunk: int = 32):
    """Gradient-free SPSA attack on the margin loss, Adam updates, projected each iteration."""
    gen = torch.Generator().manual_seed(derive_seed(tm.seed, "spsa"))
    with frozen(model), torch.no_grad():
        def loss_fn(z):
            reps = z.shape[0] // x.shape[0]
            labels = y.repeat(reps) if reps > 1 else y
            return margin_loss(upcast(model(z)), labels)

        delta_x = torch.zeros_like(x)
        m = torch.zeros_like(x)
        v = torch.zeros_like(x)
        beta1, beta2 = 0.9, 0.999
        for t in range(1, iters + 1):
            x_adv = project(x + delta_x, x, tm.eps)
            grad = spsa_gradient(loss_fn, x_adv, delta, n_samples, gen, chunk)
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            delta_x = delta_x - lr * mhat / (vhat.sqrt() + 1e-8)
            delta_x = project(x + delta_x, x, tm.eps) - x
        return project(x + delta_x, x, tm.eps)


def random_noise_attack(model, x, y, tm: ThreatModel, n_samples: int, chunk: int = 100):
    """Worst-case correctness under ``n_samples`` uniform draws from the eps-ball."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gen = torch.Generator().manual_seed(derive_seed(tm.seed, "noise"))
    correct = torch.ones(x.shape[0], dtype=torch.bool)
    with frozen(model), torch.no_grad():
        done = 0
        while done < n_samples:
            m = min(chunk, n_samples - done)
            alive = correct.nonzero().squeeze(1)
            if len(alive) == 0:
                break
            xs = x[alive]
            noise = (2 * torch.rand((m, *xs.shape), generator=gen, dtype=x.dtype) - 1) * tm.eps
            z = (xs.unsqueeze(0) + noise).clamp(0.0, 1.0).flatten(0, 1)
            pred = model(z).argmax(1).view(m, -1)
            correct[alive] &= (pred == y[alive].unsqueeze(0)).all(0)
            done += m
    return correct


def adaptive_objective(model, x_adv, y, w: AdaptiveLossWeights, quant: QuantConfig,
                       gen: torch.Generator) -> torch.Tensor:
    """Per-sample adaptive loss: ce + g-consistency term - LSB magnitude term.

    ``g(q(x))`` is differentiated through a straight-through quantizer. The
    LSB term ``|x - q(x)|^2`` (in [0, 1] pixel units) treats ``q(x)`` as a
    constant; under a straight-through rule its gradient would vanish.
    """
    logits = upcast(model(x_adv))
    total = torch.zeros(x_adv.shape[0], device=x_adv.device)
    if w.ce:
        total = total + w.ce * F.cross_entropy(logits, y, reduction="none")
    if w.g or w.lsb:
        q = quantize_ste(x_adv, quant, gen)
        if w.g:
            total = total + w.g * (logits - upcast(model(q))).pow(2).sum(1)
        if w.lsb:
            total = total - w.lsb * (x_adv - q.detach()).flatten(1).pow(2).sum(1)
    return total


def lsb_norm(x: torch.Tensor, quant: QuantConfig, seed: int = 0) -> torch.Tensor:
    """Per-sample |x - q(x)|_2 for one quantization draw."""
    gen = torch.Generator().manual_seed(seed)
    q, _ = _quantize(x, quant, gen)
    return (x - q).flatten(1).norm(dim=1)


def adaptive_attack(model, x, y, tm: ThreatModel, w: AdaptiveLossWeights, quant: QuantConfig,
                    resample_noise: bool = True) -> RestartResult:
    """PGD ascent on the adaptive objective, with worst-case restart aggregation.

    Quantization noise is redrawn at every iteration unless ``resample_noise``
    is False, in which case one noise seed is fixed per restart.
    """
    with frozen(model):
        def loss_for(idx, r):
            stream = torch.Generator().manual_seed(derive_seed(tm.seed, "adaptive-noise", r))
            fixed_seed = derive_seed(tm.seed, "adaptive-fixed", r)

            def loss(z):
                gen = stream if resample_noise else torch.Generator().manual_seed(fixed_seed)
                return adaptive_objective(model, z, y[idx], w, quant, gen)
            return loss

        return _restarts(model, x, y, tm, loss_for=loss_for,
                         still_correct=lambda adv, ys: _correct(model, adv, ys))
