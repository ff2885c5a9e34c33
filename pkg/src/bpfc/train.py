"""Bit-plane feature consistency training and the baseline training modes.

The BPFC objective on a minibatch is

    mean_i [ ce(f(x_i), y_i) + lam * |g(x_i) - g(q(x_i))|^2 ]

with ``q`` the stochastic quantizer (one fresh noise draw per step) and ``g``
the pre-softmax logits. ``reg_norm="l1"`` swaps the squared l2 distance for
an l1 distance.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import torch
import torch.nn.functional as F

from .attacks import ThreatModel, derive_seed, fgsm, frozen, ifgsm, pgd, upcast
from .quantize import QuantConfig, _quantize, quantize_batch

log = logging.getLogger(__name__)

MODES = ("bpfc", "normal", "fgsm_at", "pgd_at")
REG_NORMS = ("l2_squared", "l1")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss.

    ``model_state`` holds the parameters at the end of the last finite epoch
    and ``history`` the epoch records up to that point.
    """

    def __init__(self, message, model_state=None, history=None):
        super().__init__(message)
        self.model_state = model_state
        self.history = history or []


# dataset -> (lambda, step factor, k, epochs, batch, lr, window, eps, eps_step, small steps)
_DATASET_DEFAULTS = {
    "mnist": (30.0, 1.0, 7, 50, 64, 0.01, 30, 0.3, 0.01, 40),
    "fmnist": (25.0, 1.0, 6, 50, 64, 0.01, 30, 0.1, 0.01, 40),
    "cifar10": (1.0, 9.0, 5, 100, 128, 0.1, 20, 8 / 255, 2 / 255, 7),
}


def default_decay_epochs(epochs: int) -> list[int]:
    return sorted({int(epochs * 0.5), int(epochs * 0.75), int(epochs * 0.9)})


@dataclass
class TrainConfig:
    mode: str = "bpfc"
    lambda_initial: float = 30.0
    lambda_step_factor: float = 1.0
    lambda_step_every: int = 25
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.01
    lr_decay_factor: float = 5.0
    lr_decay_epochs: list = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    quant: QuantConfig = field(default_factory=lambda: QuantConfig(n=8, k=7))
    reg_norm: str = "l2_squared"
    early_stop_window: int = 30
    early_stop_attack: ThreatModel = field(default_factory=lambda: ThreatModel(eps=0.3, eps_step=0.01, steps=40))
    adv_attack: ThreatModel = field(default_factory=lambda: ThreatModel(eps=0.3, eps_step=0.01, steps=40,
                                                                        random_start=True))
    seed: int = 0
    # desk-scale knobs
    precision: str = "fp32"
    train_limit: int | None = None
    val_attack_limit: int | None = 1000
    val_limit: int | None = None
    augment: bool = False

    def __post_init__(self):
        if isinstance(self.quant, dict):
            self.quant = QuantConfig(**self.quant)
        for name in ("early_stop_attack", "adv_attack"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, ThreatModel(**getattr(self, name)))
        if not self.lr_decay_epochs:
            self.lr_decay_epochs = default_decay_epochs(self.epochs)
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reg_norm not in REG_NORMS:
            raise ValueError(f"reg_norm must be one of {REG_NORMS}, got {self.reg_norm!r}")
        if self.lambda_initial < 0:
            raise ValueError("lambda_initial must be nonnegative")
        if self.lambda_step_factor < 1:
            raise ValueError("lambda_step_factor must be >= 1 so the schedule is nondecreasing")
        if self.lambda_step_every < 1:
            raise ValueError("lambda_step_every must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.early_stop_window <= self.epochs:
            raise ValueError("early_stop_window must lie in [0, epochs]")
        if self.precision not in ("fp32", "bf16"):
            raise ValueError("precision must be 'fp32' or 'bf16'")

    @classmethod
    def for_dataset(cls, dataset: str, mode: str = "bpfc", **overrides) -> "TrainConfig":
        """Reference hyperparameters for ``dataset``, with keyword overrides."""
        from .data import canonical_name

        lam, factor, k, epochs, batch, lr, window, eps, eps_step, steps = _DATASET_DEFAULTS[canonical_name(dataset)]
        if "epochs" in overrides:
            window = min(window, overrides["epochs"])
        base = dict(
            mode=mode, lambda_initial=lam, lambda_step_factor=factor, lambda_step_every=25,
            epochs=epochs, batch_size=batch, lr=lr, quant=QuantConfig(n=8, k=k),
            early_stop_window=window,
            early_stop_attack=ThreatModel(eps=eps, eps_step=eps_step, steps=steps),
            adv_attack=ThreatModel(eps=eps, eps_step=eps_step, steps=steps, random_start=True),
        )
        base.update(overrides)
        if "epochs" in overrides and "lr_decay_epochs" not in overrides:
            base["lr_decay_epochs"] = []
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lambda_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lambda_initial * cfg.lambda_step_factor ** (epoch // cfg.lambda_step_every)


def _autocast(cfg: TrainConfig):
    if cfg.precision == "bf16":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def consistency_term(g_clean: torch.Tensor, g_quant: torch.Tensor, reg_norm: str = "l2_squared") -> torch.Tensor:
    diff = upcast(g_clean) - upcast(g_quant)
    if reg_norm == "l1":
        return diff.abs().sum(1)
    return diff.pow(2).sum(1)


def bpfc_loss(model, x, y, cfg: TrainConfig, noise_seed: int | None = None,
              generator: torch.Generator | None = None, lam: float | None = None):
    """Return ``(loss, components)`` for one minibatch.

    ``lam`` defaults to ``cfg.lambda_initial``. ``components`` carries the
    mean cross-entropy (``ce``), the mean unweighted regularizer (``reg``)
    and the weight used (``lambda``).
    """
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y disagree on batch size")
    lam = cfg.lambda_initial if lam is None else lam
    if generator is None:
        generator = torch.Generator().manual_seed(0 if noise_seed is None else int(noise_seed))
    xq = quantize_batch(x, cfg.quant, generator=generator)
    with _autocast(cfg):
        g_clean = model(x)
        g_quant = model(xq)
    ce = F.cross_entropy(upcast(g_clean), y, reduction="none")
    reg = consistency_term(g_clean, g_quant, cfg.reg_norm)
    loss = (ce + lam * reg).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite BPFC loss {loss.item()}")
    return loss, {"ce": ce.mean().item(), "reg": reg.mean().item(), "lambda": lam}


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    lr: float
    train_loss: float
    ce_term: float
    reg_term: float
    val_clean_acc: float | None = None
    val_robust_acc: float | None = None

    def to_log(self) -> dict:
        return {"epoch": self.epoch, "lambda": self.lam, "lr": self.lr, "train_loss": self.train_loss,
                "ce_term": self.ce_term, "reg_term": self.reg_term,
                "val_clean_acc": self.val_clean_acc, "val_robust_acc": self.val_robust_acc}


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    best_epoch: int | None
    best_val_robust_acc: float | None
    final_state: dict


def select_best_epoch(records, window_start: int):
    """Epoch with the highest validation robust accuracy at or after ``window_start``.

    Ties go to the earlier epoch. Returns None if no record qualifies.
    """
    best, best_acc = None, -math.inf
    for rec in records:
        epoch, acc = (rec.epoch, rec.val_robust_acc) if isinstance(rec, EpochRecord) else rec
        if epoch < window_start or acc is None:
            continue
        if acc > best_acc:
            best, best_acc = epoch, acc
    return best


def accuracy(model, data, batch_size: int = 500) -> float:
    """Clean accuracy over an ImageSet."""
    correct = total = 0
    with frozen(model), torch.no_grad():
        for batch in data.batches(batch_size):
            correct += (model(batch.pixels).argmax(1) == batch.labels).sum().item()
            total += len(batch)
    return correct / max(total, 1)


def robust_accuracy(model, data, tm: ThreatModel, attack=ifgsm, batch_size: int = 500) -> float:
    correct = total = 0
    for batch in data.batches(batch_size):
        adv = attack(model, batch.pixels, batch.labels, tm)
        with frozen(model), torch.no_grad():
            correct += (model(adv).argmax(1) == batch.labels).sum().item()
        total += len(batch)
    return correct / max(total, 1)


def _step_loss(model, batch, cfg, lam, gen):
    x, y = batch.pixels, batch.labels
    if cfg.mode == "bpfc":
        return bpfc_loss(model, x, y, cfg, generator=gen, lam=lam)
    if cfg.mode == "fgsm_at":
        x = fgsm(model, x, y, cfg.adv_attack)
    elif cfg.mode == "pgd_at":
        tm = cfg.adv_attack.with_(seed=int(torch.randint(0, 2 ** 31, (1,), generator=gen)))
        x = pgd(model, x, y, tm).x_adv
    with _autocast(cfg):
        logits = model(x)
    ce = F.cross_entropy(upcast(logits), y)
    if not torch.isfinite(ce):
        raise DivergenceError(f"non-finite loss {ce.item()}")
    return ce, {"ce": ce.item(), "reg": 0.0, "lambda": 0.0}


def train(model, data, cfg: TrainConfig, on_epoch: Callable[[EpochRecord], None] | None = None,
          on_checkpoint: Callable[[str, dict, EpochRecord], None] | None = None) -> TrainResult:
    """Train ``model`` in place and return the best early-stopping snapshot.

    ``data`` is a ``(train_set, val_set)`` pair of ImageSets. Clean validation
    accuracy uses the first ``cfg.val_limit`` images (all by default).
    Validation I-FGSM accuracy is measured on the first
    ``cfg.val_attack_limit`` of those in each of the last
    ``cfg.early_stop_window`` epochs.
    """
    train_set, val_set = data
    if cfg.mode == "bpfc" and cfg.precision == "bf16":
        log.warning("bf16 rounding of the logits can exceed the consistency term; prefer fp32 for BPFC")
    train_set = train_set.head(cfg.train_limit)
    val_set = val_set.head(cfg.val_limit)
    val_attack_set = val_set.head(cfg.val_attack_limit)
    window_start = cfg.epochs - cfg.early_stop_window

    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, cfg.lr_decay_epochs, gamma=1.0 / cfg.lr_decay_factor)

    history: list[EpochRecord] = []
    best_state, best_epoch, best_acc = None, None, None
    last_finite = copy.deepcopy(model.state_dict())

    for epoch in range(cfg.epochs):
        lam = lambda_at_epoch(cfg, epoch)
        lr = opt.param_groups[0]["lr"]
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "quant", epoch))
        model.train()
        tot = ce_tot = reg_tot = 0.0
        n = 0
        batches = train_set.batches(cfg.batch_size, shuffle=True, seed=derive_seed(cfg.seed, "shuffle", epoch),
                                    augment=cfg.augment)
        try:
            for batch in batches:
                loss, parts = _step_loss(model, batch, cfg, lam, gen)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                m = len(batch)
                tot += loss.item() * m
                ce_tot += parts["ce"] * m
                reg_tot += parts["reg"] * m
                n += m
        except DivergenceError as exc:
            model.load_state_dict(last_finite)
            raise DivergenceError(f"epoch {epoch}: {exc}", last_finite, history) from exc
        sched.step()

        rec = EpochRecord(epoch, lam, lr, tot / n, ce_tot / n, reg_tot / n)
        rec.val_clean_acc = accuracy(model, val_set)
        if epoch >= window_start:
            rec.val_robust_acc = robust_accuracy(model, val_attack_set, cfg.early_stop_attack)
            if best_acc is None or rec.val_robust_acc > best_acc:
                best_acc, best_epoch = rec.val_robust_acc, epoch
                best_state = copy.deepcopy(model.state_dict())
                if on_checkpoint:
                    on_checkpoint("best", best_state, rec)
        history.append(rec)
        last_finite = copy.deepcopy(model.state_dict())
        log.info("epoch %d lam=%.3g lr=%.3g loss=%.4f ce=%.4f reg=%.4f val=%.4f rob=%s", epoch, lam, lr,
                 rec.train_loss, rec.ce_term, rec.reg_term, rec.val_clean_acc, rec.val_robust_acc)
        if on_epoch:
            on_epoch(rec)

    final_state = copy.deepcopy(model.state_dict())
    if on_checkpoint:
        on_checkpoint("final", final_state, history[-1])
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_acc, final_state)


@dataclass
class ProbeResult:
    mean: torch.Tensor  # per-sample mean ratio over valid draws
    max: torch.Tensor
    valid_draws: torch.Tensor

    @property
    def overall_mean(self) -> float:
        ok = self.valid_draws > 0
        return self.mean[ok].mean().item()


def lipschitz_probe(model, x, cfg: QuantConfig, draws: int = 8, seed: int = 0) -> ProbeResult:
    """Empirical local smoothness: |g(x) - g(q(x))|^2 / |x - q(x)|^2 per sample.

    Both norms are taken in [0, 1] pixel units. Draws where ``q(x) == x``
    exactly are discarded.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    ratios = torch.full((draws, x.shape[0]), float("nan"), dtype=torch.float64)
    with frozen(model), torch.no_grad():
        g = upcast(model(x)).double()
        for d in range(draws):
            q, _ = _quantize(x, cfg, gen)
            num = (g - upcast(model(q)).double()).pow(2).sum(1)
            den = (x - q).double().flatten(1).pow(2).sum(1)
            ok = den > 0
            ratios[d, ok] = num[ok] / den[ok]
    valid = (~ratios.isnan()).sum(0)
    mean = torch.nanmean(ratios, 0)
    mx = torch.where(valid > 0, torch.nan_to_num(ratios, nan=-math.inf).max(0).values,
                     torch.tensor(float("nan"), dtype=torch.float64))
    return ProbeResult(mean, mx, valid)
