#!/usr/bin/env python3
"""Desk-scale comparison of the three conv modes on a rendered-digit corpus.

Trains the small conv architecture (full-binary baseline, separable
method 1, separable method 2) with a shared seed and protocol, then prints
final test errors and the ripple statistics of each validation curve.

Example:
    python3 scripts/run_desk_experiments.py --out runs/ --epochs 20
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from bsf.analysis import ripple_stats
from bsf.datasets import load_mnist_dir, write_digit_corpus
from bsf.layers import MODE_FULL, MODE_SEP1, MODE_SEP2
from bsf.modelio import ModelFile
from bsf.network import Network, Trainer, evaluate, split_train_val
from bsf.sepfilter import build_lut
from bsf.svdgrad import build_jacobian_table

ARCH = "conv:16 conv:16 pool conv:32 conv:32 pool fc:128 fc:10"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs")
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--batch", type=int, default=100)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--train", type=int, default=10_000)
    parser.add_argument("--test", type=int, default=2_000)
    parser.add_argument("--val-checks", type=int, default=6)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "digits"
    if not (data_dir / "train-images-idx3-ubyte").exists():
        write_digit_corpus(data_dir, args.train, args.test, seed=101)
    x, y = load_mnist_dir(data_dir, "train")
    xt, yt = load_mnist_dir(data_dir, "test")
    x = x.astype(np.float32)
    xt = xt.astype(np.float32)
    tr, va = split_train_val(len(x), seed=args.seed)

    lut = build_lut(3)
    table = build_jacobian_table(3)
    summary = {}
    for tag, mode in (("baseline", MODE_FULL), ("m1", MODE_SEP1), ("m2", MODE_SEP2)):
        t0 = time.time()
        net = Network.build(
            ARCH, (1, 28, 28), seed=args.seed, dtype=np.float32, default_mode=mode,
            lut=lut if mode != MODE_FULL else None,
            jacobian_table=table if mode == MODE_SEP2 else None,
        )
        trainer = Trainer(net, seed=args.seed, epochs=args.epochs, batch_size=args.batch)
        curve = []
        with open(out / f"{tag}_metrics.csv", "w") as f:
            f.write("epoch,train_loss,val_error\n")
            for epoch in range(args.epochs):
                res = trainer.run_epoch(
                    x[tr], y[tr], x[va], y[va], val_checks=args.val_checks
                )
                curve.extend(res.val_curve)
                f.write(f"{epoch},{res.train_loss:.17g},{res.val_error:.17g}\n")
                print(f"{tag} epoch {epoch}: loss {res.train_loss:.4f} "
                      f"val {res.val_error:.4f}", flush=True)
        with open(out / f"{tag}_curve.csv", "w") as f:
            f.write("check,val_error\n")
            for i, v in enumerate(curve):
                f.write(f"{i},{v:.17g}\n")
        test_error = evaluate(net, xt, yt)
        ModelFile.from_network(net, (1, 28, 28)).save(out / f"{tag}.bsfn")
        stats = ripple_stats(np.array(curve) * 100.0)
        summary[tag] = {
            "test_error": test_error,
            "ripple_mean_pp": stats.mean,
            "ripple_std_pp": stats.std,
            "ripple_max_pp": stats.max,
            "wall_seconds": time.time() - t0,
        }
        print(f"{tag}: test {test_error:.4f}, ripple std {stats.std:.3f}pp "
              f"({summary[tag]['wall_seconds']:.0f}s)")

    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
