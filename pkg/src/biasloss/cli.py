"""Command-line surface: train, eval, profile, sweep, curve, fixtures.

Flags mirror config-file keys one-to-one; precedence is CLI flag over
config file over built-in default. All outputs land under --out. Exit
codes: 0 success, 2 usage/config problems, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as datamod
from . import diagnostics, train as trainmod
from .train import ConfigError, CheckpointError, NonFiniteLossError, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_CONFIG_FLAGS = [
    ("loss", str, "loss function: ce | focal | bias"),
    ("alpha", float, "exponential weight slope"),
    ("beta", float, "weight offset (minimum raw weight is 1 - beta)"),
    ("clamp_lo", float, "lower clamp for per-sample weights"),
    ("clamp_hi", float, "upper clamp for per-sample weights"),
    ("detach_weight", str, "true/false: treat weights as constants in backprop"),
    ("gamma", float, "focal modulation exponent"),
    ("epochs", int, "training epochs"),
    ("batch_size", int, "minibatch size"),
    ("lr0", float, "initial learning rate"),
    ("momentum", float, "SGD momentum"),
    ("weight_decay", float, "L2 weight decay (BN parameters exempt)"),
    ("schedule", str, "decay points, e.g. 60:0.2,120:0.2,160:0.2"),
    ("seed", int, "global seed"),
    ("dataset", str, "mnist | cifar10"),
    ("data_dir", str, "dataset root (default: DATA_DIR env var)"),
    ("width_multiplier", float, "uniform channel scaling"),
    ("dropout", float, "dropout rate before the classifier"),
    ("augment", str, "true/false: random flip/rotation"),
    ("prefetch", str, "true/false: background batch prefetch"),
    ("train_limit", int, "use only the first N training samples"),
    ("val_limit", int, "use only the first N validation samples"),
]


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    for name, typ, help_ in _CONFIG_FLAGS:
        p.add_argument(f"--{name}", type=typ, default=None, help=help_)


def _gather_config(args):
    overrides = {name: getattr(args, name) for name, _, _ in _CONFIG_FLAGS
                 if getattr(args, name) is not None}
    return trainmod.build_config(args.config, overrides)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg, split):
    root = cfg.data_dir or os.environ.get("DATA_DIR")
    if not root:
        raise ConfigError("no dataset root: pass --data_dir or set DATA_DIR")
    if not Path(root).exists():
        raise ConfigError(f"dataset root {root} does not exist")
    return datamod.load_dataset(cfg.dataset, root, split)


def cmd_train(args):
    cfg = _gather_config(args)
    out = _out_dir(args)
    train_ds = _load_split(cfg, "train")
    val_ds = _load_split(cfg, "test")

    def progress(row):
        if not args.quiet:
            print(f"epoch {row.epoch}: val loss {row.loss:.4f} "
                  f"top1 {row.top1:.4f} lr {row.lr:g}")

    log, _ = trainmod.train_run(cfg, out_dir=out, train_ds=train_ds,
                                val_ds=val_ds, progress=progress)
    if not args.quiet:
        print(f"wrote {out / 'runlog.csv'}, {out / 'best.ckpt'}, "
              f"{out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _gather_config(args)
    ds = _load_split(cfg, args.split)
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    loss, top1 = trainmod.evaluate(ckpt, ds, cfg)
    print(f"loss={loss!r} top1={top1!r}")
    return EXIT_OK


def cmd_profile(args):
    cfg = _gather_config(args)
    ds = _load_split(cfg, args.split)
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    state, _ = trainmod.load_checkpoint(ckpt)
    model = trainmod.SkipblockNetMicro(cfg.model_spec(), seed=cfg.seed)
    try:
        model.load_state(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not fit model: {e}") from None
    layers = args.layers.split(",") if args.layers else None
    norm = datamod.default_augment(cfg.dataset).normalize
    prof = diagnostics.profile(model, ds, layers, batch_size=cfg.batch_size,
                               normalize=norm, loss_id=cfg.loss)
    out = _out_dir(args) / "profile.csv"
    out.write_text(prof.to_csv())
    if not args.quiet:
        sys.stdout.write(prof.to_csv())
    return EXIT_OK


def _parse_grid(text, what):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list: {text!r}") from None
    if not values:
        raise ConfigError(f"{what} list must be non-empty")
    return values


def cmd_sweep(args):
    alphas = _parse_grid(args.alphas, "alpha")
    betas = _parse_grid(args.betas, "beta")
    cfg = _gather_config(args)
    out = _out_dir(args)
    train_ds = _load_split(cfg, "train")
    val_ds = _load_split(cfg, "test")

    def run_cell(ab):
        a, b = ab
        cell_cfg = trainmod.build_config(
            args.config,
            {name: getattr(args, name) for name, _, _ in _CONFIG_FLAGS
             if getattr(args, name) is not None} |
            {"loss": "bias", "alpha": a, "beta": b})
        cell_dir = out / f"a{a:g}_b{b:g}"
        try:
            log, _ = trainmod.train_run(cell_cfg, out_dir=cell_dir,
                                        train_ds=train_ds, val_ds=val_ds)
            row = log.last("val")
            return (a, b, row.top1, row.loss, "ok")
        except NonFiniteLossError as e:
            return (a, b, float("nan"), float("nan"), f"nonfinite:{e}")

    cells = [(a, b) for a in alphas for b in betas]
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    lines = ["alpha,beta,final_top1,final_loss,status"]
    for a, b, top1, loss, status in results:
        lines.append(f"{a!r},{b!r},{top1!r},{loss!r},{status}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    if not args.quiet:
        print("\n".join(lines))
    return EXIT_OK


def cmd_curve(args):
    alphas = _parse_grid(args.alpha, "alpha")
    betas = _parse_grid(args.beta, "beta")
    rows = diagnostics.bias_curve(alphas, betas, samples=args.samples,
                                  clamp_lo=args.clamp_lo_ or 0.5,
                                  clamp_hi=args.clamp_hi_ or 1.5)
    out = _out_dir(args) / "curve.csv"
    out.write_text(diagnostics.curve_csv(rows))
    if not args.quiet:
        print(f"wrote {out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_fixtures(args):
    out = _out_dir(args)
    # handcrafted format fixtures: a 2-image 2x2 IDX pair and a 1-record
    # CIFAR batch with known contents
    imgs = np.array([[[[0, 64], [128, 255]]],
                     [[[255, 1], [2, 3]]]], dtype=np.uint8)
    datamod.write_idx_images(out / "fixture-images-idx3-ubyte", imgs)
    datamod.write_idx_labels(out / "fixture-labels-idx1-ubyte",
                             np.array([3, 7], dtype=np.uint8))
    cimg = np.arange(3 * 32 * 32, dtype=np.uint8).reshape(1, 3, 32, 32) % 251
    datamod.write_cifar10(out / "fixture-cifar.bin", cimg, np.array([7]))
    msg = [f"wrote format fixtures under {out}"]
    if args.synthetic_mnist:
        datamod.write_synthetic_mnist(out / "synthetic-mnist",
                                      args.synthetic_mnist,
                                      max(args.synthetic_mnist // 2, 16),
                                      seed=args.seed or 0)
        msg.append(f"synthetic MNIST-format dataset: {out / 'synthetic-mnist'}")
    if args.synthetic_cifar:
        datamod.write_synthetic_cifar10(out / "synthetic-cifar10",
                                        args.synthetic_cifar,
                                        max(args.synthetic_cifar // 2, 16),
                                        seed=args.seed or 0)
        msg.append(f"synthetic CIFAR-format dataset: {out / 'synthetic-cifar10'}")
    if not args.quiet:
        print("\n".join(msg))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="biasloss",
        description="Train compact CNNs with a variance-weighted loss, "
                    "profile per-layer activation variance, and emit "
                    "weight-curve data.")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress output")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="per-layer activation variance")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layers", help="comma-separated probe names "
                                    "(default: all)")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("sweep", help="grid of short runs over alpha x beta")
    _add_config_flags(p)
    p.add_argument("--alphas", default="0.1,0.3,0.5")
    p.add_argument("--betas", default="0.1,0.3,0.5")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("curve", help="emit weight-function curve data")
    p.add_argument("--alpha", default="0.3", help="comma-separated values")
    p.add_argument("--beta", default="0.3", help="comma-separated values")
    p.add_argument("--samples", type=int, default=101)
    p.add_argument("--clamp_lo", dest="clamp_lo_", type=float, default=None)
    p.add_argument("--clamp_hi", dest="clamp_hi_", type=float, default=None)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("fixtures", help="write format fixtures and optional "
                                        "synthetic datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic_mnist", type=int, default=0,
                   help="also write an IDX-format synthetic dataset of N "
                        "training images")
    p.add_argument("--synthetic_cifar", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_fixtures)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help, 2 for usage errors
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, datamod.FormatError,
            FileNotFoundError, diagnostics.ProbeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
