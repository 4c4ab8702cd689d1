"""Command-line entry point: ``mcpnet <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as datamod
from .autodiff import gradcheck
from .metrics import EmptyDataset
from .model import CheckpointError, InvalidConfig, MCPNet, MCPNetConfig
from .sketchio import (DEFAULT_CANVAS, DEFAULT_POINTS, CategorySpec, SketchError, extract_points,
                       labels_to_image, load_sketch, perturb, preprocess)
from .train import TrainConfig, evaluate, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _kernel_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad width factor {text!r}") from exc


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--columns", type=int, default=3, help="number of columns (MCPNet-x)")
    p.add_argument("--kernel-lengths", type=_kernel_list, default=(1, 3, 5))
    p.add_argument("--width-factor", type=_fraction, default=1)


def _data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="corpus directory or manifest.json")
    p.add_argument("--points", type=int, default=DEFAULT_POINTS)
    p.add_argument("--canvas", type=int, default=DEFAULT_CANVAS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcpnet", description="Multi-column point-CNN sketch segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("preprocess", help="thin, sample and cache every sketch in a corpus")
    _data_flags(p)

    p = sub.add_parser("gen-synthetic", help="write a procedural labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--template", default="lamp", help="comma-separated: " + ",".join(datamod.TEMPLATE_SPECS))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--canvas", type=int, default=DEFAULT_CANVAS)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on the train split")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--history", help="CSV path for per-epoch history (default: <out>.csv)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--deterministic", action="store_true",
                   help="accepted for compatibility; training is always single-threaded and seeded")

    p = sub.add_parser("eval", help="print per-category P/C metrics")
    _data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--out", help="optional CSV report path")

    p = sub.add_parser("predict", help="label one sketch and write the coloured result")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--category-spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=None, help="default: the model's N")
    p.add_argument("--canvas", type=int, default=DEFAULT_CANVAS)
    p.add_argument("--offset", type=int, default=0,
                   help="first global class id of this category; categories are numbered in sorted name order")

    p = sub.add_parser("perturb", help="drop a component and/or add random dots")
    p.add_argument("image")
    p.add_argument("--category-spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drop", help="component name or index to remove")
    p.add_argument("--dots", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to check")
    p.add_argument("--points", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-3, help="central-difference step")
    _model_flags(p)
    p.set_defaults(columns=1, width_factor=_fraction("1/16"))
    return parser


def _resolved(args: argparse.Namespace) -> str:
    def plain(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, Fraction):
            return str(v)
        return v
    return json.dumps({k: plain(v) for k, v in sorted(vars(args).items())}, sort_keys=True)


def _label_space(manifest: datamod.Manifest) -> datamod.LabelSpace:
    return datamod.LabelSpace(manifest.specs)


def cmd_preprocess(args) -> int:
    manifest = datamod.Manifest.load(args.data)
    samples = datamod.load_samples(manifest, None, args.points, args.canvas)
    print(f"cached {len(samples)} point sets (N={args.points}, canvas={args.canvas})")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    for template in args.template.split(","):
        cfg = datamod.SynthConfig(template, args.count, args.seed, args.canvas, train_fraction=args.train_fraction)
        manifest = datamod.gen_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.records)} records to {Path(args.out) / datamod.MANIFEST_NAME}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = datamod.Manifest.load(args.data)
    space = _label_space(manifest)
    cfg = MCPNetConfig.build(space.num_classes, args.columns, args.kernel_lengths, args.points, args.width_factor)
    train_set = datamod.load_samples(manifest, "train", args.points, args.canvas)
    val_set = datamod.load_samples(manifest, "test", args.points, args.canvas)
    tcfg = TrainConfig(args.batch, args.lr, args.momentum, args.weight_decay, args.epochs, args.seed, args.eval_every)
    model = MCPNet.init(cfg, args.seed)

    def show(row):
        val = "" if row["val_p_metric"] is None else f"  val P {row['val_p_metric']:.3f} C {row['val_c_metric']:.3f}"
        print(f"epoch {row['epoch']:3d}  loss {row['mean_train_loss']:.4f}{val}", flush=True)

    _, history = fit(model, train_set, val_set, tcfg, space, callback=show)
    model.save(args.out)
    hist_path = Path(args.history) if args.history else Path(str(args.out) + ".csv")
    hist_path.write_text(history.to_csv())
    print(f"saved {args.out} and {hist_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = datamod.Manifest.load(args.data)
    model = MCPNet.load(args.model)
    split = None if args.split == "all" else args.split
    samples = datamod.load_samples(manifest, split, model.config.n_points, args.canvas)
    rep = evaluate(model, samples, _label_space(manifest))
    print(rep.to_text())
    if args.out:
        Path(args.out).write_text(rep.to_csv())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = MCPNet.load(args.model)
    spec = CategorySpec.load(args.category_spec)
    n = args.points or model.config.n_points
    img = preprocess(load_sketch(args.image, spec), args.canvas)
    lps = extract_points(img, spec, n)
    c = spec.num_components
    if not 0 <= args.offset <= model.config.num_classes - c:
        raise ValueError(f"--offset {args.offset} leaves no room for {c} classes "
                         f"in a {model.config.num_classes}-class model")
    # restrict the argmax to this category's slice of the global label space
    scores = model.forward(lps.points.astype(model.dtype), "eval").values
    pred = scores[:, args.offset:args.offset + c].argmax(axis=1)
    out = labels_to_image(type(lps)(lps.base, pred), spec, args.canvas)
    out.save(args.out)
    print(f"wrote {args.out} ({lps.n_original} points)")
    return EXIT_OK


def cmd_perturb(args) -> int:
    spec = CategorySpec.load(args.category_spec)
    img = load_sketch(args.image, spec)
    drop = args.drop
    if drop is not None and drop.isdigit():
        drop = int(drop)
    perturb(img, spec, drop, args.dots, args.seed).save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def network_gradcheck(seed: int, n_points: int = 8, num_classes: int = 3, columns: int = 1,
                      kernel_lengths=(1, 3, 5), width_factor="1/16", step: float = 1e-3) -> float:
    """Max relative finite-difference error of the full network loss for one seed."""
    from .autodiff import Tensor, softmax_cross_entropy

    rng = np.random.default_rng(seed)
    cfg = MCPNetConfig.build(num_classes, columns, kernel_lengths, n_points, _fraction(str(width_factor)))
    model = MCPNet.init(cfg, seed, dtype=np.float64)
    points = Tensor(rng.random((n_points, 2)))
    labels = rng.integers(0, num_classes, n_points)
    return gradcheck(lambda: softmax_cross_entropy(model.logits(points, "train"), labels),
                     [points] + model.parameters(), step)


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        err = network_gradcheck(seed, args.points, args.classes, args.columns, args.kernel_lengths,
                                args.width_factor, args.step)
        print(f"seed {seed}: max rel. err {err:.3e}")
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max rel. err {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "perturb": cmd_perturb,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    print(f"config: {_resolved(args)}", flush=True)
    try:
        return COMMANDS[args.command](args)
    except (SketchError, CheckpointError, datamod.ManifestError, datamod.EmptyManifest, EmptyDataset,
            InvalidConfig, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
