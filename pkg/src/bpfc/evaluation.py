"""Evaluation suites: white-box and transfer grids, restart studies, sanity
checks and accuracy/loss versus epsilon curves.

Accuracies are always means of per-sample worst-case correctness. Every
attack call gets its own seed derived from (suite seed, attack id, batch id),
so a report is reproducible from the checkpoint, the config and the seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import attacks as A
from .attacks import ThreatModel, derive_seed, frozen, upcast
from .data import default_cw_params, default_step_counts

log = logging.getLogger(__name__)

# Table column order: clean, single-step, iterative, PGD by step count, then the rest.
BOUNDED_ATTACKS = ("fgsm", "ifgsm", "pgd", "pgd-targeted", "mifgsm", "spsa", "random", "adaptive")
COLUMN_ORDER = ("clean", "fgsm", "ifgsm", "pgd", "pgd-targeted", "mifgsm", "deepfool", "cw", "spsa",
                "random", "adaptive", "bb")


@dataclass
class AttackRecord:
    attack: str
    threat: dict | None
    n_samples: int
    accuracy: float | None
    seed: int
    fooling_rate: float | None = None
    mean_l2: float | None = None
    mean_loss: float | None = None
    wall_time: float = 0.0
    error: str | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    model_id: str
    dataset: str
    records: list = field(default_factory=list)
    sanity: dict = field(default_factory=dict)

    def add(self, record: AttackRecord) -> AttackRecord:
        self.records.append(record)
        return record

    def get(self, attack: str) -> AttackRecord | None:
        for rec in self.records:
            if rec.attack == attack:
                return rec
        return None

    def accuracies(self) -> dict:
        return {r.attack: r.accuracy for r in self.records}

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps({"model_id": self.model_id, "dataset": self.dataset, **asdict(rec)}) + "\n")
            if self.sanity:
                fh.write(json.dumps({"model_id": self.model_id, "dataset": self.dataset,
                                     "sanity": self.sanity}) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path) -> "EvalReport":
        report = None
        for line in Path(path).read_text().splitlines():
            row = json.loads(line)
            if report is None:
                report = cls(row["model_id"], row["dataset"])
            if "sanity" in row:
                report.sanity = row["sanity"]
                continue
            row.pop("model_id"), row.pop("dataset")
            report.records.append(AttackRecord(**row))
        return report


def column_key(attack: str):
    """Sort key putting attack names in table order (PGD columns by step count)."""
    base = attack.split("-")[0] if not attack.startswith("pgd-targeted") else "pgd-targeted"
    if attack.startswith("bb-"):
        base = "bb"
    rank = COLUMN_ORDER.index(base) if base in COLUMN_ORDER else len(COLUMN_ORDER)
    digits = "".join(ch for ch in attack.split("-")[-1] if ch.isdigit())
    return rank, attack.startswith("pgd-targeted") and "random" in attack, int(digits) if digits else 0, attack


def write_csv(path, rows: dict) -> Path:
    """``rows`` maps a row label (training method) to ``{attack: accuracy}``.

    Missing cells are written as ``absent``; accuracies as percentages.
    """
    columns = sorted({c for r in rows.values() for c in r}, key=column_key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *columns])
        for label, cells in rows.items():
            w.writerow([label, *[("absent" if cells.get(c) is None else f"{100 * cells[c]:.2f}")
                                 for c in columns]])
    return Path(path)


def iter_batches(data, batch_size):
    for bid, batch in enumerate(data.batches(batch_size)):
        yield bid, batch.pixels, batch.labels


def _timed(report, name, threat, n, seed, fn):
    """Run ``fn() -> dict`` and append a record; failures become error records."""
    start = time.perf_counter()
    try:
        out = fn()
        rec = AttackRecord(name, threat, n, out.pop("accuracy", None), seed, **out)
    except Exception as exc:  # one failing attack must not abort the suite
        log.exception("attack %s failed", name)
        rec = AttackRecord(name, threat, n, None, seed, error=f"{type(exc).__name__}: {exc}")
    rec.wall_time = time.perf_counter() - start
    log.info("%s: acc=%s", name, rec.accuracy)
    return report.add(rec)


def _mean_ce(model, x, y):
    with frozen(model), torch.no_grad():
        return F.cross_entropy(upcast(model(x)), y, reduction="sum").item()


def clean_accuracy(model, data, batch_size=500):
    correct = loss = 0.0
    with frozen(model), torch.no_grad():
        for _, x, y in iter_batches(data, batch_size):
            logits = upcast(model(x))
            correct += (logits.argmax(1) == y).sum().item()
            loss += F.cross_entropy(logits, y, reduction="sum").item()
    return correct / len(data), loss / len(data)


def bounded_accuracy(model, data, attack: str, tm: ThreatModel, seed: int = 0, batch_size: int = 500,
                     source=None, **kwargs):
    """Worst-case accuracy (and mean adversarial CE) of ``model`` under one bounded attack.

    ``attack`` is one of fgsm, ifgsm, pgd, pgd-targeted, mifgsm, spsa, random,
    adaptive. With ``source`` the adversarial points are crafted on ``source``
    and evaluated on ``model`` (transfer setting).
    """
    if attack not in BOUNDED_ATTACKS:
        raise ValueError(f"unknown attack id {attack!r}; valid ids: {', '.join(BOUNDED_ATTACKS)}")
    crafter = source if source is not None else model
    correct = 0
    loss = 0.0
    for bid, x, y in iter_batches(data, batch_size):
        btm = tm.with_(seed=derive_seed(seed, attack, bid))
        if attack == "fgsm":
            adv = A.fgsm(crafter, x, y, btm)
        elif attack == "ifgsm":
            adv = A.ifgsm(crafter, x, y, btm)
        elif attack == "mifgsm":
            adv = A.mi_fgsm(crafter, x, y, btm, decay=kwargs.get("decay", 1.0))
        elif attack == "pgd":
            res = A.pgd(crafter, x, y, btm)
            adv = res.x_adv
            if source is None:
                correct += res.worst_case_correct.sum().item()
                loss += _mean_ce(model, adv, y)
                continue
        elif attack == "pgd-targeted":
            res = A.pgd_targeted(crafter, x, y, btm)
            adv = res.x_adv
            if source is None:
                correct += res.correct.sum().item()
                loss += _mean_ce(model, adv, y)
                continue
        elif attack == "adaptive":
            res = A.adaptive_attack(crafter, x, y, btm, kwargs["weights"], kwargs["quant"],
                                    resample_noise=kwargs.get("resample_noise", True))
            correct += res.worst_case_correct.sum().item()
            loss += _mean_ce(model, res.x_adv, y)
            continue
        elif attack == "spsa":
            adv = A.spsa(crafter, x, y, btm, **{k: kwargs[k] for k in ("delta", "lr", "n_samples", "iters")
                                                if k in kwargs})
        elif attack == "random":
            ok = A.random_noise_attack(model, x, y, btm, kwargs.get("n_samples", 1000))
            correct += ok.sum().item()
            continue
        else:  # pragma: no cover - guarded above
            raise AssertionError(attack)
        with frozen(model), torch.no_grad():
            logits = upcast(model(adv))
            correct += (logits.argmax(1) == y).sum().item()
            loss += F.cross_entropy(logits, y, reduction="sum").item()
    return correct / len(data), loss / len(data)


def _threat_dict(tm: ThreatModel):
    return asdict(tm)


def whitebox_suite(model, data, spec, seed: int = 0, batch_size: int = 500, pgd_1000: bool = False,
                   unbounded_limit: int | None = 200, deepfool_steps: int = 100,
                   cw_params: dict | None = None, targeted_steps: int | None = None,
                   model_id: str = "model") -> EvalReport:
    """Clean, FGSM, I-FGSM, PGD at the dataset's step counts, targeted PGD, DeepFool and C&W.

    PGD-1000 runs only with ``pgd_1000=True``. The unbounded attacks use the
    first ``unbounded_limit`` samples.
    """
    name = spec.name if hasattr(spec, "name") else str(spec)
    base = spec.default_threat if hasattr(spec, "default_threat") else None
    small, mid, large = default_step_counts(name)
    if base is None:
        from .data import default_threat_model
        base = default_threat_model(name)
    report = EvalReport(model_id, name)
    n = len(data)

    def clean():
        acc, loss = clean_accuracy(model, data, batch_size)
        return {"accuracy": acc, "mean_loss": loss}

    _timed(report, "clean", None, n, seed, clean)
    fg = base.with_(steps=1)
    _timed(report, "fgsm", _threat_dict(fg), n, seed, lambda: dict(zip(
        ("accuracy", "mean_loss"), bounded_accuracy(model, data, "fgsm", fg, seed, batch_size))))
    it = base.with_(steps=small)
    _timed(report, f"ifgsm-{small}", _threat_dict(it), n, seed, lambda: dict(zip(
        ("accuracy", "mean_loss"), bounded_accuracy(model, data, "ifgsm", it, seed, batch_size))))
    for steps in (small, mid, large) if pgd_1000 else (small, mid):
        tm = base.with_(steps=steps, random_start=True)
        _timed(report, f"pgd-{steps}", _threat_dict(tm), n, seed, lambda tm=tm: dict(zip(
            ("accuracy", "mean_loss"), bounded_accuracy(model, data, "pgd", tm, seed, batch_size))))
    t_steps = targeted_steps or mid
    for policy, tag in (("least_likely", "ll"), ("random_target", "random")):
        tm = base.with_(steps=t_steps, random_start=True, target_policy=policy)
        _timed(report, f"pgd-targeted-{tag}-{t_steps}", _threat_dict(tm), n, seed, lambda tm=tm: dict(zip(
            ("accuracy", "mean_loss"), bounded_accuracy(model, data, "pgd-targeted", tm, seed, batch_size))))

    sub = data.head(unbounded_limit)
    cw = {**default_cw_params(name), **(cw_params or {})}

    def unbounded(kind):
        def run():
            fooled, l2s, init = [], [], []
            for _, x, y in iter_batches(sub, batch_size):
                if kind == "deepfool":
                    res = A.deepfool(model, x, deepfool_steps, y=y)
                else:
                    res = A.cw_l2(model, x, y, **cw)
                fooled.append(res.fooled)
                l2s.append(res.l2)
                init.append(res.initially_correct)
            agg = A.UnboundedResult(None, torch.cat(fooled), torch.cat(l2s), torch.cat(init))
            return {"accuracy": 1 - agg.fooling_rate, "fooling_rate": agg.fooling_rate, "mean_l2": agg.mean_l2}
        return run

    _timed(report, "deepfool", {"max_steps": deepfool_steps}, len(sub), seed, unbounded("deepfool"))
    _timed(report, "cw", cw, len(sub), seed, unbounded("cw"))
    return report


def blackbox_suite(target_model, source_model, data, tm: ThreatModel, seed: int = 0, batch_size: int = 500,
                   decay: float = 1.0, model_id: str = "model", dataset: str = "") -> EvalReport:
    """FGSM, PGD and MI-FGSM crafted on ``source_model`` and scored on ``target_model``."""
    report = EvalReport(model_id, dataset)
    n = len(data)
    for attack, threat in (("fgsm", tm.with_(steps=1, random_start=False, restarts=1)),
                           ("pgd", tm.with_(random_start=True, restarts=1)),
                           ("mifgsm", tm.with_(random_start=False, restarts=1))):
        label = "bb-fgsm" if attack == "fgsm" else f"bb-{attack}-{threat.steps}"
        _timed(report, label, _threat_dict(threat), n, seed, lambda a=attack, t=threat: dict(zip(
            ("accuracy", "mean_loss"),
            bounded_accuracy(target_model, data, a, t, seed, batch_size, source=source_model, decay=decay))))
    return report


def restart_study(model, data_sample, tm: ThreatModel, restart_counts, seed: int = 0,
                  batch_size: int = 500) -> dict:
    """Worst-case PGD accuracy for each restart count.

    Restart ``r`` always uses the seed derived from ``(seed, batch, r)``, so
    the first ``r`` restarts of a long run are exactly an ``r``-restart run
    and one pass at ``max(restart_counts)`` yields the whole curve.
    """
    counts = sorted(set(int(c) for c in restart_counts))
    if counts[0] < 1:
        raise ValueError("restart counts must be >= 1")
    tm = tm.with_(restarts=counts[-1], random_start=True)
    masks = []
    for bid, x, y in iter_batches(data_sample, batch_size):
        res = A.pgd(model, x, y, tm.with_(seed=derive_seed(seed, "restarts", bid)))
        masks.append(res.correct)
    correct = torch.cat(masks, 1)
    return {c: correct[:c].all(0).float().mean().item() for c in counts}


@dataclass
class CurveTable:
    attack: str
    eps: list
    accuracy: list
    mean_loss: list

    def rows(self):
        return list(zip(self.eps, self.accuracy, self.mean_loss))


def curve_sweep(model, data, attack_id: str, eps_grid, base: ThreatModel | None = None, seed: int = 0,
                batch_size: int = 500, plot_path=None, step_scale: float = 2.5) -> CurveTable:
    """Accuracy and mean cross-entropy versus epsilon for one attack.

    For iterative attacks the step size grows with epsilon:
    ``max(base.eps_step, step_scale * eps / steps)``.
    """
    grid = [float(e) for e in eps_grid]
    if grid != sorted(grid):
        raise ValueError("eps_grid must be sorted ascending")
    base = base or ThreatModel(eps=0.0, eps_step=0.01, steps=7, random_start=attack_id == "pgd")
    accs, losses = [], []
    for i, eps in enumerate(grid):
        step = max(base.eps_step, step_scale * eps / max(base.steps, 1))
        tm = base.with_(eps=eps, eps_step=step)
        acc, loss = bounded_accuracy(model, data, attack_id, tm, derive_seed(seed, "curve", i), batch_size)
        accs.append(acc)
        losses.append(loss)
    table = CurveTable(attack_id, grid, accs, losses)
    if plot_path is not None:
        plot_curve(table, plot_path)
    return table


def plot_curve(table: CurveTable, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(table.eps, [100 * a for a in table.accuracy], marker="o")
    ax1.set_xlabel("epsilon")
    ax1.set_ylabel("accuracy (%)")
    ax2.plot(table.eps, table.mean_loss, marker="o", color="tab:red")
    ax2.set_xlabel("epsilon")
    ax2.set_ylabel("mean cross-entropy")
    fig.suptitle(table.attack)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def _nondecreasing(values, tol=0.0):
    return all(b >= a - tol for a, b in zip(values, values[1:]))


def sanity_checks(model, data, spec, source_model=None, seed: int = 0, batch_size: int = 500,
                  fgsm_grid=None, pgd_grid=None, zero_tol: float = 0.01, fooling_target: float = 0.99,
                  unbounded_limit: int = 100, cw_params: dict | None = None, curve_steps: int = 40,
                  plot_dir=None) -> dict:
    """The five gradient-masking checks. Each verdict carries the numbers behind it.

    1. iterative attacks beat single-step FGSM;
    2. white-box PGD beats the same PGD transferred from ``source_model``;
    3. C&W reaches ``fooling_target`` fooling rate;
    4. PGD accuracy falls to ``zero_tol`` or less by the top of ``pgd_grid``
       (0.6 for MNIST);
    5. mean FGSM loss is nondecreasing over ``fgsm_grid`` (0 to 0.4 in steps
       of 0.05 for MNIST).
    """
    name = spec.name if hasattr(spec, "name") else str(spec)
    from .data import default_threat_model
    base = default_threat_model(name)
    small = default_step_counts(name)[0]
    fgsm_max, vanish_eps = {"mnist": (0.4, 0.6), "fmnist": (0.2, 0.4), "cifar10": (16 / 255, 64 / 255)}[name]
    if fgsm_grid is None:
        fgsm_grid = [float(e) for e in np.round(np.linspace(0, fgsm_max, 9), 6)]
    if pgd_grid is None:
        pgd_grid = [float(e) for e in np.round(np.linspace(0, vanish_eps, 7), 6)]
    verdicts = {}

    fg_acc, _ = bounded_accuracy(model, data, "fgsm", base.with_(steps=1), seed, batch_size)
    it_acc, _ = bounded_accuracy(model, data, "ifgsm", base.with_(steps=small), seed, batch_size)
    pgd_tm = base.with_(steps=small, random_start=True)
    pgd_acc, _ = bounded_accuracy(model, data, "pgd", pgd_tm, seed, batch_size)
    verdicts["iterative_stronger"] = {
        "passed": it_acc <= fg_acc and pgd_acc <= fg_acc,
        "fgsm": fg_acc, "ifgsm": it_acc, "pgd": pgd_acc}

    if source_model is not None:
        bb_acc, _ = bounded_accuracy(model, data, "pgd", pgd_tm, seed, batch_size, source=source_model)
        verdicts["whitebox_stronger"] = {"passed": pgd_acc <= bb_acc, "whitebox_pgd": pgd_acc,
                                         "blackbox_pgd": bb_acc}
    else:
        verdicts["whitebox_stronger"] = {"passed": None, "reason": "no source model supplied"}

    sub = data.head(unbounded_limit)
    cw = {**default_cw_params(name), **(cw_params or {})}
    fooled = []
    for _, x, y in iter_batches(sub, batch_size):
        fooled.append(A.cw_l2(model, x, y, **cw).fooled)
    fr = torch.cat(fooled).float().mean().item()
    verdicts["unbounded_reaches_full_fooling"] = {"passed": fr >= fooling_target, "cw_fooling_rate": fr,
                                                  "target": fooling_target}

    pgd_curve = curve_sweep(model, data, "pgd", pgd_grid, base.with_(eps=0.0, steps=curve_steps,
                                                                      random_start=True),
                            seed, batch_size,
                            plot_path=None if plot_dir is None else Path(plot_dir) / "pgd_accuracy_vs_eps.png")
    verdicts["accuracy_vanishes"] = {"passed": pgd_curve.accuracy[-1] <= zero_tol, "eps": pgd_curve.eps,
                                     "accuracy": pgd_curve.accuracy, "tolerance": zero_tol}

    fg_curve = curve_sweep(model, data, "fgsm", fgsm_grid, base.with_(eps=0.0, steps=1), seed, batch_size,
                           plot_path=None if plot_dir is None else Path(plot_dir) / "fgsm_loss_vs_eps.png")
    verdicts["fgsm_loss_monotone"] = {"passed": _nondecreasing(fg_curve.mean_loss), "eps": fg_curve.eps,
                                      "mean_loss": fg_curve.mean_loss, "accuracy": fg_curve.accuracy}
    verdicts["all_passed"] = all(v["passed"] for k, v in verdicts.items() if isinstance(v, dict))
    return verdicts


def adaptive_grid(model, data, tm: ThreatModel, quant, grid=None, seed: int = 0, batch_size: int = 500,
                  resample_noise: bool = True) -> dict:
    """Accuracy under each adaptive loss weighting; ``(1, 0, 0)`` is plain PGD."""
    grid = grid or [(1, g, lsb) for g in (0, 1) for lsb in (0, 1, 10)]
    out = {}
    for ce, g, lsb in grid:
        w = A.AdaptiveLossWeights(ce, g, lsb)
        acc, _ = bounded_accuracy(model, data, "adaptive", tm, seed, batch_size, weights=w, quant=quant,
                                  resample_noise=resample_noise)
        out[(ce, g, lsb)] = acc
    return out


def worst_case(values) -> float:
    return min(v for v in values if v is not None and not math.isnan(v))
