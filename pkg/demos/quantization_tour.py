"""A tour of the bit-plane quantizer.

Quantizing an 8-bit image to its top ``8 - k`` bit planes keeps the coarse
structure and drops the low-order detail. The stochastic variant adds a
little uniform noise before flooring, so pixels near a bin edge land in
either neighbouring bin. This script prints the bin-assignment curve for
one level and saves a grid of MNIST digits at several values of k.

Run:  BPFC_DATA_ROOT=/path/to/data python demos/quantization_tour.py
"""
import argparse

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from bpfc.data import load_dataset
from bpfc.quantize import QuantConfig, bin_assignment_probability, bit_planes, quantize_batch


def assignment_curve(level=80, k=5, trials=20000):
    cfg = QuantConfig(n=8, k=k)
    print(f"P[q(v) = {level}] for n=8, k={k}")
    for v in range(level - 28, level + 29, 4):
        p, se = bin_assignment_probability(v, level, cfg, trials, seed=v)
        print(f"  v={v:3d}  p={p:.3f} +/- {se:.3f}  {'#' * round(40 * p)}")


def digit_grid(path, ks=(3, 5, 7), count=6):
    _, _, test, _ = load_dataset("mnist")
    x = test.head(count).pixels
    rows = [("original", x)]
    for k in ks:
        rows.append((f"k={k} stochastic", quantize_batch(x, QuantConfig(k=k), noise_seed=0)))
    rows.append(("top plane only", bit_planes(x, {7})))
    fig, axes = plt.subplots(len(rows), count, figsize=(count * 1.2, len(rows) * 1.3))
    for r, (label, imgs) in enumerate(rows):
        for c in range(count):
            ax = axes[r, c]
            ax.imshow(imgs[c, 0], cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r, 0].set_ylabel(label, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    print(f"saved {path}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--output", default="quantization_tour.png")
    parser.add_argument("--skip-images", action="store_true", help="only print the assignment curve")
    args = parser.parse_args()
    torch.manual_seed(0)
    assignment_curve()
    if not args.skip_images:
        digit_grid(args.output)
