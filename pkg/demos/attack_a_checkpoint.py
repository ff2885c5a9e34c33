"""Run the white-box attack suite and the gradient-masking checks on a checkpoint.

A defense that only hides its gradients looks strong against PGD and weak
against everything else. The sanity checks look for the usual symptoms:
single-step attacks doing better than iterative ones, transfer attacks
beating white-box ones, accuracy that never reaches zero as the budget
grows, and a bumpy FGSM loss curve.

Run:
  BPFC_DATA_ROOT=/path/to/data python demos/attack_a_checkpoint.py \
      runs/acceptance/mnist-bpfc/best.pt --source runs/acceptance/mnist-net-a/final.pt
"""
import argparse
import json

from bpfc import evaluation as E
from bpfc.data import load_dataset
from bpfc.models import load_checkpoint


def main():
    parser = argparse.ArgumentParser(description="white-box suite and sanity checks")
    parser.add_argument("checkpoint")
    parser.add_argument("--source", help="checkpoint of a separately trained model for transfer attacks")
    parser.add_argument("--limit", type=int, default=500)
    parser.add_argument("--plot-dir", default="sanity_plots")
    args = parser.parse_args()

    model, meta = load_checkpoint(args.checkpoint)
    _, _, test, spec = load_dataset("mnist")
    data = test.balanced_subset(args.limit, seed=0)

    report = E.whitebox_suite(model.eval(), data, spec, seed=0, unbounded_limit=50, model_id=args.checkpoint)
    for rec in report.records:
        extra = f"  mean l2 {rec.mean_l2:.3f}" if rec.mean_l2 else ""
        print(f"{rec.attack:28s} {rec.accuracy:7.2%}{extra}")

    source = load_checkpoint(args.source)[0].eval() if args.source else None
    verdicts = E.sanity_checks(model, data, spec, source_model=source, unbounded_limit=50,
                               plot_dir=args.plot_dir)
    print(json.dumps({k: v["passed"] if isinstance(v, dict) else v for k, v in verdicts.items()}, indent=2))


if __name__ == "__main__":
    main()
