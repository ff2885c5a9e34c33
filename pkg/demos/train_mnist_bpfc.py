"""Train M-LeNet on MNIST with and without the bit-plane consistency term.

Both runs use the same optimizer and schedule. The only difference is the
regularizer that pulls the logits of an image toward the logits of its
quantized copy. After training we compare clean accuracy, PGD-40 accuracy
and the local smoothness probe.

The full 50-epoch schedule takes a few hours on CPU. ``--epochs 5`` gives a
quick look; robustness at that length is far from converged.

Run:  BPFC_DATA_ROOT=/path/to/data python demos/train_mnist_bpfc.py --epochs 5
"""
import argparse
import logging

import torch

from bpfc import evaluation as E
from bpfc.attacks import ThreatModel
from bpfc.data import load_dataset
from bpfc.models import build_m_lenet, save_checkpoint
from bpfc.quantize import QuantConfig
from bpfc.train import TrainConfig, lipschitz_probe, train


def run(mode, epochs, train_set, val_set, precision):
    torch.manual_seed(0)
    cfg = TrainConfig.for_dataset("mnist", mode=mode, epochs=epochs,
                                  early_stop_window=min(30, epochs - 1), precision=precision,
                                  val_attack_limit=1000)
    result = train(build_m_lenet(), (train_set, val_set), cfg,
                   on_epoch=lambda r: logging.info("%s epoch %d  val %.4f  reg %.4f",
                                                   mode, r.epoch, r.val_clean_acc, r.reg_term))
    return result.model.eval()


def main():
    parser = argparse.ArgumentParser(description="BPFC versus normal training on MNIST")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--eval-limit", type=int, default=1000)
    parser.add_argument("--save-dir", default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_set, val_set, test, _ = load_dataset("mnist", seed=0)
    test = test.head(args.eval_limit)
    pgd40 = ThreatModel(eps=0.3, eps_step=0.01, steps=40, random_start=True)
    quant = QuantConfig(k=7)

    # BPFC runs in float32: bf16 rounding of the logits swamps the small
    # consistency term. The normal run has no such term.
    models = {"bpfc": run("bpfc", args.epochs, train_set, val_set, "fp32"),
              "normal": run("normal", args.epochs, train_set, val_set, "bf16")}
    print(f"{'mode':8s} {'clean':>8s} {'pgd-40':>8s} {'probe':>10s}")
    for mode, model in models.items():
        clean, _ = E.clean_accuracy(model, test)
        robust, _ = E.bounded_accuracy(model, test, "pgd", pgd40)
        probe = lipschitz_probe(model, test.pixels[:500], quant).overall_mean
        print(f"{mode:8s} {clean:8.2%} {robust:8.2%} {probe:10.4g}")
        if args.save_dir:
            save_checkpoint(f"{args.save_dir}/{mode}.pt", model, "m-lenet")


if __name__ == "__main__":
    main()
