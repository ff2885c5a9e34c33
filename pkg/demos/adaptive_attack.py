"""Attack a BPFC model with an objective that knows about the defense.

Besides cross-entropy, the adaptive objective can push the logits of the
adversarial image away from those of its quantized copy (``w_g``) and can
reward perturbations that live in the low bit planes the quantizer removes
(``w_lsb``). If the defense relied on the regularizer alone, one of these
weightings should beat plain PGD by a wide margin.

Run:  BPFC_DATA_ROOT=/path/to/data python demos/adaptive_attack.py CHECKPOINT --steps 40
"""
import argparse

from bpfc import evaluation as E
from bpfc.attacks import ThreatModel
from bpfc.data import load_dataset
from bpfc.models import load_checkpoint
from bpfc.quantize import QuantConfig


def main():
    parser = argparse.ArgumentParser(description="adaptive attack grid")
    parser.add_argument("checkpoint")
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--limit", type=int, default=500)
    parser.add_argument("--k", type=int, default=7)
    args = parser.parse_args()

    model = load_checkpoint(args.checkpoint)[0].eval()
    _, _, test, _ = load_dataset("mnist")
    data = test.balanced_subset(args.limit, seed=0)
    tm = ThreatModel(eps=0.3, eps_step=0.01, steps=args.steps, random_start=True)

    grid = E.adaptive_grid(model, data, tm, QuantConfig(k=args.k))
    plain, _ = E.bounded_accuracy(model, data, "pgd", tm)
    print(f"plain PGD-{args.steps}: {plain:.2%}")
    for (ce, g, lsb), acc in sorted(grid.items(), key=lambda kv: kv[1]):
        print(f"  ce={ce} g={g} lsb={lsb:>2}: {acc:.2%}  ({(acc - plain) * 100:+.1f} pts)")


if __name__ == "__main__":
    main()
