"""Command-line entry point: ``bpfc <command> [options]``.

Exit status is 0 on success, 1 for bad configuration or arguments and 2 for
runtime failures (missing data, diverged training, numerical errors).
``sanity`` exits with 3 when the checks ran but at least one failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError

ATTACKS = ("fgsm", "ifgsm", "pgd", "pgd-targeted", "mifgsm", "deepfool", "cw", "spsa", "random", "adaptive")


def _cmd_train(args):
    from .experiment import run_train

    man = run_train(args.config, args.output_dir)
    print(json.dumps(man.checkpoints, indent=2))


def _cmd_evaluate(args):
    from .config import load_config
    from .experiment import evaluate_from_config

    cfg = load_config(args.config)
    if args.suites:
        cfg.evaluate.suites = args.suites.split(",")
    if args.limit is not None:
        cfg.evaluate.limit = args.limit
    if args.source:
        cfg.evaluate.source_checkpoint = args.source
    man = evaluate_from_config(cfg, args.checkpoint, args.output_dir)
    print(json.dumps(man.reports, indent=2))


def _load_eval_data(args):
    from .data import load_dataset

    _tr, _va, test, spec = load_dataset(args.dataset, seed=args.seed, root=args.data_root)
    return test.head(args.limit), spec


def _cmd_attack(args):
    from . import attacks as A
    from . import evaluation as E
    from .data import default_cw_params, default_quant_config
    from .experiment import checkpoint_model
    from .quantize import QuantConfig

    model, _ = checkpoint_model(args.checkpoint, args.arch)
    data, spec = _load_eval_data(args)
    base = spec.default_threat
    tm = A.ThreatModel(
        eps=base.eps if args.eps is None else args.eps,
        eps_step=base.eps_step if args.eps_step is None else args.eps_step,
        steps=base.steps if args.steps is None else args.steps,
        restarts=args.restarts,
        random_start=args.attack in ("pgd", "pgd-targeted", "adaptive"),
        target_policy={"pgd-targeted": args.target}.get(args.attack, "untargeted"),
        seed=args.seed,
    )
    record = {"attack": args.attack, "n_samples": len(data), "seed": args.seed}
    if args.attack in ("deepfool", "cw"):
        import torch

        parts = []
        for _, x, y in E.iter_batches(data, args.batch_size):
            parts.append(A.deepfool(model, x, args.steps or 100, y=y) if args.attack == "deepfool"
                         else A.cw_l2(model, x, y, **default_cw_params(spec.name)))
        fooled = torch.cat([p.fooled for p in parts])
        l2 = torch.cat([p.l2 for p in parts])
        init = torch.cat([p.initially_correct for p in parts])
        res = A.UnboundedResult(None, fooled, l2, init)
        record.update(fooling_rate=res.fooling_rate, mean_l2=res.mean_l2, accuracy=1 - res.fooling_rate)
    else:
        kwargs = {}
        if args.attack == "adaptive":
            kwargs = {"weights": A.AdaptiveLossWeights(args.w_ce, args.w_g, args.w_lsb),
                      "quant": default_quant_config(spec.name) if args.k is None
                      else QuantConfig(k=args.k)}
        if args.attack == "random":
            kwargs = {"n_samples": args.noise_samples}
        if args.attack == "fgsm":
            tm = tm.with_(steps=1)
        acc, loss = E.bounded_accuracy(model, data, args.attack, tm, args.seed, args.batch_size, **kwargs)
        record.update(threat=vars(tm), accuracy=acc, mean_loss=loss)
    print(json.dumps(record, default=str))
    if args.output:
        Path(args.output).write_text(json.dumps(record, default=str) + "\n")


def _cmd_sanity(args):
    from .evaluation import sanity_checks
    from .experiment import checkpoint_model

    model, _ = checkpoint_model(args.checkpoint, args.arch)
    source = checkpoint_model(args.source)[0] if args.source else None
    data, spec = _load_eval_data(args)
    verdicts = sanity_checks(model, data, spec, source_model=source, seed=args.seed,
                             unbounded_limit=min(args.unbounded_limit, len(data)), plot_dir=args.plot_dir)
    text = json.dumps(verdicts, indent=2)
    print(text)
    if args.output:
        Path(args.output).write_text(text)
    return 0 if verdicts["all_passed"] else 3


def _cmd_quantize_preview(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import default_quant_config, load_dataset
    from .quantize import QuantConfig, quantize_batch

    _tr, _va, test, spec = load_dataset(args.dataset, seed=0, root=args.data_root)
    k = default_quant_config(spec.name).k if args.k is None else args.k
    cfg = QuantConfig(k=k, mode=args.mode)
    x = test.subset(list(args.indices)).pixels
    q = quantize_batch(x, cfg, noise_seed=args.seed)
    fig, axes = plt.subplots(2, len(args.indices), figsize=(1.8 * len(args.indices), 3.8), squeeze=False)
    for j in range(len(args.indices)):
        for row, img in enumerate((x[j], q[j])):
            ax = axes[row][j]
            arr = img.permute(1, 2, 0).numpy()
            ax.imshow(arr.squeeze(-1) if arr.shape[-1] == 1 else arr, cmap="gray", vmin=0, vmax=1)
            ax.axis("off")
    axes[0][0].set_title("original", fontsize=8, loc="left")
    axes[1][0].set_title(f"quantized k={k} ({args.mode})", fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(args.output)
    plt.close(fig)
    print(args.output)


def _cmd_compare(args):
    from .experiment import compare_runs

    rows = compare_runs(args.manifests, args.output)
    print(json.dumps(rows, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpfc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML config")
    t.add_argument("config")
    t.add_argument("--output-dir")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="run evaluation suites on a checkpoint")
    e.add_argument("config")
    e.add_argument("--checkpoint", help="defaults to the best checkpoint of the config's run")
    e.add_argument("--suites", help="comma separated subset of whitebox,blackbox,restarts,sanity,curve")
    e.add_argument("--limit", type=int)
    e.add_argument("--source", help="source checkpoint for transfer attacks")
    e.add_argument("--output-dir")
    e.set_defaults(func=_cmd_evaluate)

    def data_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--arch", help="expected architecture; mismatches are rejected")
        sp.add_argument("--data-root")
        sp.add_argument("--limit", type=int, default=1000)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--batch-size", type=int, default=500)
        sp.add_argument("--output", help="write the JSON result here as well")

    a = sub.add_parser("attack", help="run one attack and report accuracy")
    data_args(a)
    a.add_argument("--attack", choices=ATTACKS, required=True)
    a.add_argument("--eps", type=float)
    a.add_argument("--eps-step", type=float)
    a.add_argument("--steps", type=int)
    a.add_argument("--restarts", type=int, default=1)
    a.add_argument("--target", choices=("least_likely", "random_target"), default="least_likely")
    a.add_argument("--w-ce", type=float, default=1.0)
    a.add_argument("--w-g", type=float, default=0.0)
    a.add_argument("--w-lsb", type=float, default=0.0)
    a.add_argument("--k", type=int, help="quantization bits removed (adaptive attack)")
    a.add_argument("--noise-samples", type=int, default=1000)
    a.set_defaults(func=_cmd_attack)

    s = sub.add_parser("sanity", help="gradient-masking sanity checks")
    data_args(s)
    s.add_argument("--source", help="independently trained model for the transfer check")
    s.add_argument("--unbounded-limit", type=int, default=100)
    s.add_argument("--plot-dir")
    s.set_defaults(func=_cmd_sanity)

    qp = sub.add_parser("quantize-preview", help="save a PNG of images before and after quantization")
    qp.add_argument("--dataset", required=True)
    qp.add_argument("--data-root")
    qp.add_argument("--k", type=int)
    qp.add_argument("--mode", default="stochastic", choices=("stochastic", "simple", "uniform_noise"))
    qp.add_argument("--indices", type=int, nargs="+", default=[0, 1, 2, 3, 4, 5])
    qp.add_argument("--seed", type=int, default=0)
    qp.add_argument("--output", default="quantize_preview.png")
    qp.set_defaults(func=_cmd_quantize_preview)

    c = sub.add_parser("compare", help="merge evaluation manifests into one table")
    c.add_argument("manifests", nargs="+")
    c.add_argument("--output", help="CSV path")
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
