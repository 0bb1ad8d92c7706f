"""Command-line interface.

Subcommands: build-lut, build-gradtable, train, eval, cost, analyze, ripple,
verify-grad.  Exit codes: 0 success, 1 failed check or runtime error, 2 usage
error.  The BSF_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np


def _cmd_build_lut(args) -> int:
    from .sepfilter import build_lut

    lut = build_lut(args.d)
    if args.out:
        lut.save(args.out)
    print(f"side {lut.d}: {lut.num_keys} filter keys -> {lut.num_separable} separable filters")
    for code, sf in enumerate(lut.sep_filters):
        u = "".join("+" if x > 0 else "-" for x in sf.u)
        v = "".join("+" if x > 0 else "-" for x in sf.v)
        print(f"  code {code:3d}: u {u}  v {v}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_build_gradtable(args) -> int:
    from .svdgrad import build_jacobian_table

    table = build_jacobian_table(args.d)
    print(
        f"side {table.d}: {len(table.degenerate)} jacobians, "
        f"{table.degenerate_count} degenerate (identity fallback)"
    )
    if args.out:
        table.save(args.out)
        print(f"wrote {args.out}")
    return 0


def _load_dataset(cfg, split: str):
    from . import datasets

    if cfg.dataset == "digits":
        if split == "train":
            n, seed = cfg.train_limit or 10_000, cfg.seed
        else:
            n, seed = cfg.test_limit or 2_000, cfg.seed + 1
        images, labels = datasets.render_digit_dataset(n, seed=seed)
        x = (images.astype(np.float64) / 127.5 - 1.0)[:, None]
        return x, labels.astype(np.int64)
    if cfg.dataset == "mnist":
        x, y = datasets.load_mnist_dir(cfg.data_dir, split)
    else:
        batches = sorted(Path(cfg.data_dir).glob("data_batch_*.bin"))
        if split != "train":
            batches = [Path(cfg.data_dir) / "test_batch.bin"]
        x, y = datasets.load_cifar10(batches)
    limit = cfg.train_limit if split == "train" else cfg.test_limit
    if limit:
        x, y = x[:limit], y[:limit]
    return x, y


def _build_tables(cfg):
    from .sepfilter import build_lut
    from .svdgrad import JacobianTable, build_jacobian_table
    from .layers import MODE_FULL, MODE_SEP2

    sides = sorted(
        {spec.side for spec in _conv_specs(cfg) if spec.mode != MODE_FULL}
    )
    if not sides:
        return None, None
    if len(sides) > 1:
        raise ValueError(f"one table side per run is supported, got {sides}")
    lut = build_lut(sides[0])
    table = None
    if any(spec.mode == MODE_SEP2 for spec in _conv_specs(cfg)):
        if cfg.grad_table == "build":
            table = build_jacobian_table(sides[0])
        elif cfg.grad_table == "identity":
            table = JacobianTable.identity(sides[0])
        else:
            table = JacobianTable.load(cfg.grad_table)
    return lut, table


def _conv_specs(cfg):
    from .network import parse_arch, ConvLayerSpec

    c = cfg.input_shape[0]
    return [i for i in parse_arch(cfg.arch, c, cfg.mode) if isinstance(i, ConvLayerSpec)]


def _cmd_train(args) -> int:
    from .config import parse_config
    from .network import Network, Trainer, evaluate, split_train_val
    from .modelio import ModelFile

    cfg = parse_config(args.config)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.metrics:
        cfg.metrics_csv = args.metrics
    if args.curve:
        cfg.curve_csv = args.curve
    if args.out:
        cfg.model_out = args.out
    env_seed = os.environ.get("BSF_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)

    x, y = _load_dataset(cfg, "train")
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    x = x.astype(dtype)
    lut, table = _build_tables(cfg)
    net = Network.build(
        cfg.arch, cfg.input_shape, default_mode=cfg.mode, lut=lut,
        jacobian_table=table, seed=cfg.seed, dtype=dtype,
    )
    trainer = Trainer(
        net, seed=cfg.seed, epochs=cfg.epochs, batch_size=cfg.batch_size,
        lr_start=cfg.lr_start, lr_end=cfg.lr_end,
    )
    tr, va = split_train_val(len(x), seed=cfg.seed)

    metrics_f = open(cfg.metrics_csv, "w", newline="") if cfg.metrics_csv else None
    curve_f = open(cfg.curve_csv, "w", newline="") if cfg.curve_csv else None
    if metrics_f:
        metrics_f.write("epoch,train_loss,val_error\n")
    if curve_f:
        curve_f.write("check,val_error\n")
    check_idx = 0
    try:
        for epoch in range(cfg.epochs):
            res = trainer.run_epoch(
                x[tr], y[tr], x[va], y[va], val_checks=cfg.val_checks_per_epoch
            )
            if metrics_f:
                metrics_f.write(f"{epoch},{res.train_loss:.17g},{res.val_error:.17g}\n")
            if curve_f:
                for v in res.val_curve:
                    curve_f.write(f"{check_idx},{v:.17g}\n")
                    check_idx += 1
            print(
                f"epoch {epoch}: train_loss {res.train_loss:.5f} "
                f"val_error {res.val_error:.5f}",
                flush=True,
            )
    finally:
        if metrics_f:
            metrics_f.close()
        if curve_f:
            curve_f.close()

    if cfg.model_out:
        ModelFile.from_network(net, cfg.input_shape).save(cfg.model_out)
        print(f"wrote {cfg.model_out}")
    xt, yt = _load_dataset(cfg, "test")
    test_error = evaluate(net, xt.astype(dtype), yt)
    print(f"test_error {test_error:.5f}")
    return 0


def _cmd_eval(args) -> int:
    from .config import TrainConfig
    from .modelio import ModelFile, evaluate_model

    model = ModelFile.load(args.model)
    cfg = TrainConfig(dataset=args.dataset, data_dir=args.data_dir,
                      test_limit=args.limit, train_limit=args.limit)
    x, y = _load_dataset(cfg, args.split)
    err = evaluate_model(model, x, y)
    print(f"error_rate {err:.5f} on {len(y)} samples")
    return 0


def _cmd_cost(args) -> int:
    from .config import parse_config
    from .infer import cost_report
    from .network import parse_arch, ConvLayerSpec

    cfg = parse_config(args.config)
    c, h, w = cfg.input_shape
    shapes = []
    idx = 0
    for item in parse_arch(cfg.arch, c, cfg.mode):
        if isinstance(item, ConvLayerSpec):
            idx += 1
            shapes.append((f"conv{idx}", item.kernels, item.channels, item.side, h, w))
        elif item == "pool":
            h //= 2
            w //= 2
    report = cost_report(shapes)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
        print(f"wrote {args.json}")
    return 0


def _cmd_analyze(args) -> int:
    from .analysis import analyze_model
    from .modelio import ModelFile

    report = analyze_model(ModelFile.load(args.model))
    text = json.dumps(report, indent=2)
    if args.json:
        Path(args.json).write_text(text)
        print(f"wrote {args.json}")
    else:
        print(text)
    return 0


def _cmd_ripple(args) -> int:
    from .analysis import ripple_stats

    with open(args.csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or args.column not in rows[0]:
        print(f"column {args.column!r} not found in {args.csv}", file=sys.stderr)
        return 1
    series = np.array([float(r[args.column]) for r in rows])
    if args.percent:
        series = series * 100.0
    stats = ripple_stats(series, window=args.window)
    print(json.dumps({"mean": stats.mean, "std": stats.std, "max": stats.max}))
    return 0


def _cmd_verify_grad(args) -> int:
    from .svdgrad import verify_gradients

    worst = verify_gradients(
        args.trials, d=args.d, seed=args.seed, min_gap=args.gap, h=args.h
    )
    print(f"max relative error over {args.trials} trials: {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsf",
        description="Binarized convolutional networks with separable rank-1 filters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-lut", help="enumerate the separable-filter table")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_build_lut)

    p = sub.add_parser("build-gradtable", help="precompute rank-1 jacobians per filter")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_build_gradtable)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", default="")
    p.add_argument("--metrics", default="")
    p.add_argument("--curve", default="")
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", default=".")
    p.add_argument("--dataset", default="mnist", choices=("mnist", "cifar10", "digits"))
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cost", help="storage and MAC cost model for an architecture")
    p.add_argument("--config", required=True)
    p.add_argument("--json", default="")
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("analyze", help="filter-usage histograms and correlations")
    p.add_argument("--model", required=True)
    p.add_argument("--json", default="")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("ripple", help="ripple statistics of a metrics CSV column")
    p.add_argument("--csv", required=True)
    p.add_argument("--column", default="val_error")
    p.add_argument("--window", type=int, default=51)
    p.add_argument("--percent", action="store_true",
                   help="scale the series by 100 before analysis")
    p.set_defaults(func=_cmd_ripple)

    p = sub.add_parser("verify-grad", help="analytic vs finite-difference jacobians")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gap", type=float, default=0.1)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_verify_grad)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
