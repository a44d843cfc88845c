"""Command-line entry point: ``bnnkit <command> ...``.

Exit codes: 0 on success, 1 on runtime failures (bad files, shape errors,
failed checks), 2 on usage errors (unknown flags, presets or config keys).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from bnnkit import cost
from bnnkit.data import load_split_dir, load_train_test
from bnnkit.errors import BnnError, ConfigError
from bnnkit.graph import PRESETS, ArchConfig, build_model, load_arch, parse_shape

log = logging.getLogger("bnnkit")


class UsageError(Exception):
    """Reported like an argparse error: message on stderr, exit code 2."""


def _arch(ref: str) -> ArchConfig:
    try:
        return load_arch(ref)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _shape(text: str) -> tuple[int, int, int]:
    try:
        return parse_shape(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _fit_to_data(cfg: ArchConfig, images: np.ndarray, num_classes: int) -> ArchConfig:
    shape = tuple(images.shape[1:])
    if cfg.input_shape != shape:
        log.info("using input shape %s from the data (config says %s)", shape, cfg.input_shape)
        cfg = cfg.replace(input_shape=shape)
    if num_classes > cfg.num_classes:
        raise BnnError(f"data has {num_classes} classes but the model outputs {cfg.num_classes}")
    return cfg


# -- summarize -----------------------------------------------------------------

def cmd_summarize(args) -> int:
    refs = list(PRESETS) if args.arch == ["all"] else args.arch
    cfgs = [_arch(r) for r in refs]
    reports = cost.compare_archs(cfgs, args.input)
    if args.format == "json":
        import json

        body = [r.to_dict() if args.layers else {k: v for k, v in r.to_dict().items() if k != "layers"} for r in reports]
        print(json.dumps(body[0] if len(body) == 1 else body, indent=2))
    elif args.format == "csv":
        rows = cost.to_csv_rows(reports)
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        print(cost.format_table(reports))
        if args.layers:
            for r in reports:
                print()
                print(cost.format_layers(r))
    if args.plot:
        from bnnkit import plotting

        prefix = Path(args.plot)
        plotting.plot_cost_sections(reports, prefix.with_name(prefix.name + "_sections.png"))
        plotting.plot_cost_frontier(reports, prefix.with_name(prefix.name + "_frontier.png"))
    return 0


# -- verify --------------------------------------------------------------------

def cmd_verify(args) -> int:
    from bnnkit.verify import run_all

    failed = False
    for res in run_all(args.trials, args.seed):
        status = "ok" if res.ok else "FAILED"
        print(f"{res.name}: {res.trials} trials, {len(res.failures)} mismatches ... {status}")
        for msg in res.failures[:10]:
            print(f"  {msg}")
        failed |= not res.ok
    return 1 if failed else 0


# -- train / eval / flips --------------------------------------------------------

def _train_config(args, epochs: int, optimizer: str):
    from bnnkit.training import TrainConfig

    return TrainConfig(
        epochs=epochs,
        base_lr=args.lr,
        warmup_epochs=args.warmup,
        batch_size=args.batch,
        seed=args.seed,
        optimizer=optimizer,
        hflip=args.hflip,
        crop_pad=args.augment,
        reset_flips_each_epoch=not args.cumulative_flips,
    )


def cmd_train(args) -> int:
    from bnnkit.serialization import export_weights
    from bnnkit.training import fit

    cfg = _arch(args.arch)
    train, test = load_train_test(args.data)
    cfg = _fit_to_data(cfg, train.images, train.num_classes)
    tcfg = _train_config(args, args.epochs, args.optimizer)
    g = build_model(cfg, seed=args.seed)
    history = fit(g, train, tcfg, test, log_stream=sys.stdout, csv_path=args.csv, stop_at=args.stop_at)
    size = export_weights(g, args.out)
    print(f"wrote {args.out} ({size} bytes) after {len(history)} epochs")
    if args.plot:
        from bnnkit import plotting

        plotting.plot_training([m.csv_row() for m in history], args.plot)
    return 0


def cmd_eval(args) -> int:
    from bnnkit.serialization import load_weights
    from bnnkit.training import evaluate

    cfg = _arch(args.arch)
    train = None
    data = Path(args.data)
    try:
        train = load_split_dir(data, "train")
    except FileNotFoundError:
        pass
    mean, std = (train.mean, train.std) if train is not None else (None, None)
    ds = train if args.split == "train" and train is not None else load_split_dir(data, args.split, mean, std)
    cfg = _fit_to_data(cfg, ds.images, ds.num_classes)
    g = load_weights(build_model(cfg, materialize=True), args.weights)
    print(f"top1={evaluate(g, ds):.6f} n={len(ds)}")
    return 0


def cmd_flips(args) -> int:
    from bnnkit.training import FLIP_CSV_COLUMNS, fit, flip_csv_rows

    cfg = _arch(args.arch)
    train, _ = load_train_test(args.data)
    if args.limit:
        train = train.subset(slice(0, args.limit))
    cfg = _fit_to_data(cfg, train.images, train.num_classes)
    optimizers = ["adam", "sgd"] if args.optimizer == "both" else [args.optimizer]
    rows = []
    for opt in optimizers:
        g = build_model(cfg, seed=args.seed)
        history = fit(g, train, _train_config(args, args.epochs, opt), None, log_stream=sys.stderr)
        rows += flip_csv_rows(history, opt)
    out = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=list(FLIP_CSV_COLUMNS), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.csv:
            out.close()
    if args.plot:
        from bnnkit import plotting

        plotting.plot_flip_percentiles(rows, args.plot)
    return 0


# -- parser --------------------------------------------------------------------

def _add_training_args(p: argparse.ArgumentParser, epochs: int, lr: float, warmup: int) -> None:
    p.add_argument("--arch", required=True, help="preset name or key=value config file")
    p.add_argument("--data", required=True, help="directory with MNIST-named IDX files")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--warmup", type=int, default=warmup, help="linear warmup epochs")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", type=int, default=0, metavar="PAD", help="random pad-and-crop margin")
    p.add_argument("--hflip", action="store_true", help="random horizontal flips")
    p.add_argument("--cumulative-flips", action="store_true", help="do not reset flip counts each epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnkit", description="Binary DenseNet-style models: cost, checks, training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="operation and size report")
    p.add_argument("--arch", nargs="+", required=True, help="presets, config files, or 'all'")
    p.add_argument("--input", type=_shape, default=None, help="CxHxW, default from the config")
    p.add_argument("--format", choices=("table", "json", "csv"), default="table")
    p.add_argument("--layers", action="store_true", help="include per-layer rows")
    p.add_argument("--plot", metavar="PREFIX", help="write PREFIX_sections.png and PREFIX_frontier.png")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("verify", help="randomized kernel and estimator checks")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train with latent weights, write a weight file")
    _add_training_args(p, epochs=10, lr=0.005, warmup=1)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--csv", help="per-epoch metrics CSV")
    p.add_argument("--plot", metavar="PNG", help="loss/accuracy figure")
    p.add_argument("--stop-at", type=float, default=None, help="stop once eval top-1 reaches this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a weight file")
    p.add_argument("--arch", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flips", help="per-epoch weight flip statistics as CSV")
    _add_training_args(p, epochs=3, lr=0.005, warmup=0)
    p.add_argument("--optimizer", choices=("adam", "sgd", "both"), default="adam")
    p.add_argument("--limit", type=int, default=0, help="use only the first N training images")
    p.add_argument("--csv", help="output path (default stdout)")
    p.add_argument("--plot", metavar="PNG", help="flip percentile figure")
    p.set_defaults(func=cmd_flips)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (BnnError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
