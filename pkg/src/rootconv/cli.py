"""``rootconv`` command line: cost, transform, train, eval, covar, bench, validate, export."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .arch import (ARCHITECTURES, NetSpec, apply_root_transform, make_arch, make_schedule,
                   make_tiny_convnet, parse_variant)
from .bench import STRATEGIES, bench_gemm
from .cost import compare, net_cost
from .data import load_dataset
from .tensor import set_threads
from .trainer import TrainConfig, evaluate, load_checkpoint, metrics_to_csv, save_checkpoint, train

ARCH_CHOICES = sorted(ARCHITECTURES) + ["tiny"]


class UsageError(Exception):
    """Bad combination of otherwise well-formed arguments (exit status 2)."""


# ----------------------------------------------------------------------
# helpers

def _read_net(path: str) -> NetSpec:
    return NetSpec.from_json(Path(path).read_text())


def _build(arch: str, variant: str, width: float, **kw) -> NetSpec:
    if arch == "tiny":
        sched = parse_variant(variant, 2)
        return make_tiny_convnet(groups=sched.counts[1], **{k: v for k, v in kw.items() if v is not None})
    kw = {k: v for k, v in kw.items() if v is not None}
    if arch != "nin":
        kw.pop("in_channels", None)
    return make_arch(arch, variant, width=width, **kw)


def _net_from_args(args, **kw) -> NetSpec:
    if getattr(args, "spec", None):
        net = _read_net(args.spec)
        if args.variant not in (None, "baseline"):
            net = apply_root_transform(net, args.variant)
        return net
    if not args.arch:
        raise UsageError("one of --arch or --spec is required")
    return _build(args.arch, args.variant or "baseline", args.width, **kw)


def _lr_schedule(text: str) -> list[tuple[int, float]]:
    """``0.05`` or ``0:0.1,20:0.01`` (first epoch : learning rate)."""
    if ":" not in text:
        return [(0, float(text))]
    out = []
    for part in text.split(","):
        e, lr = part.split(":")
        out.append((int(e), float(lr)))
    return out


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)


def _dataset(args, split: str = "train"):
    ds = load_dataset(args.data, args.data_dir, split, **_synth_kw(args))
    if args.subset:
        ds = ds.subset(args.subset)
    return ds


def _synth_kw(args) -> dict:
    if not args.data.startswith("synth:"):
        return {}
    kw = {}
    for name in ("n", "size", "channels"):
        v = getattr(args, f"synth_{name}", None)
        if v is not None:
            kw[name] = v
    return kw


# ----------------------------------------------------------------------
# subcommands

def cmd_cost(args) -> int:
    net = _net_from_args(args, input_size=args.input_size)
    opts = dict(include_bn=not args.exclude_bn, include_classifier=not args.exclude_classifier, strict=args.strict)
    rep = net_cost(net, **opts)
    if args.baseline:
        if args.spec:
            base = _read_net(args.spec)
        else:
            base = _build(args.arch, "baseline", args.width, input_size=args.input_size)
        rep = compare(net_cost(base, **opts), rep)
    print(rep.to_text())
    _write(args.out, rep.to_csv())
    return 0


def cmd_export(args) -> int:
    net = _net_from_args(args, input_size=args.input_size)
    text = net.to_json()
    if args.out:
        _write(args.out, text)
        print(f"wrote {net.name} ({len(net)} layers) to {args.out}")
    else:
        print(text)
    return 0


def cmd_transform(args) -> int:
    net = _read_net(args.input).validate()
    positions = len(net.spatial_positions())
    sched = make_schedule(args.topology, args.degree, positions)
    overrides = {}
    for item in args.override or ():
        name, _, g = item.partition("=")
        if not g:
            raise UsageError(f"--override expects layer=groups, got {item!r}")
        overrides[name] = int(g)
    out = apply_root_transform(net, sched, overrides)
    out = NetSpec.from_json(out.to_json()).validate()
    _write(args.out, out.to_json())
    print(f"{out.name}: schedule {'-'.join(map(str, sched.counts))} over {positions} positions")
    return 0


def cmd_validate(args) -> int:
    net = _read_net(args.spec).validate()
    shp = net.shapes()
    print(f"ok: {net.name}, {len(net)} layers, output {shp[net.output]}")
    return 0


def cmd_train(args) -> int:
    data = _dataset(args)
    n, c, h, w = data.images.shape
    if args.spec:
        net = _net_from_args(args)
    else:
        net = _net_from_args(args, num_classes=data.classes, input_size=h, in_channels=c)
    cfg = TrainConfig(lr_schedule=_lr_schedule(args.lr), momentum=args.momentum, weight_decay=args.weight_decay,
                      batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                      pad_crop=args.augment, mirror=args.augment)
    eval_data = None
    if args.eval_data:
        eval_data = load_dataset(args.eval_data, args.data_dir, "test", **_synth_kw(args))

    def report(m):
        ev = "" if m.eval_acc is None else f"  eval_acc {m.eval_acc:.4f}"
        print(f"epoch {m.epoch:3d}  loss {m.loss:.4f}  train_acc {m.train_acc:.4f}{ev}", flush=True)

    state, history = train(net, data, cfg, eval_data, on_epoch=report)
    if args.out:
        save_checkpoint(state, args.out)
        print(f"checkpoint written to {args.out}")
    _write(args.metrics, metrics_to_csv(history))
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = _dataset(args, args.split)
    acc = evaluate(state, data, k=args.topk)
    print(f"top-{args.topk} accuracy {acc:.4f} on {len(data)} images")
    return 0


def cmd_covar(args) -> int:
    state = load_checkpoint(args.checkpoint)
    layers = [s for s in args.layers.split(",") if s]
    if len(layers) != 2:
        raise UsageError("--layers takes exactly two comma-separated layer names")
    src, dst = layers
    for name in layers:
        state.net.layer(name)
    dl = state.net.layer(dst)
    groups = args.groups or (dl.groups if dl.kind == "conv" else 1)
    mode = "correlation" if args.correlation else ("whitened" if args.whiten else "covariance")
    if args.noise:
        res = analysis.noise_block_statistics(state, src, dst, groups, n_images=args.images, seed=args.seed,
                                              mode=mode)
        cmap = res["map"]
    else:
        if args.data:
            x = _dataset(args).images[:args.images]
            if state.mean is not None:
                x = x - state.mean.reshape(1, -1, 1, 1)
        else:
            rng = np.random.Generator(np.random.Philox(args.seed))
            x = rng.standard_normal((args.images, *state.net.input_shape[1:])).astype(np.float32)
        X1, X2 = analysis.collect_pair(state, src, dst, x.astype(np.float32))
        if mode == "whitened":
            cmap = analysis.whitened_cross_cov(X1, X2)
        elif mode == "correlation":
            cmap = analysis.correlation(X1, X2)
        else:
            cmap = analysis.cross_cov(X1, X2)
    off, on = analysis.block_contrast(cmap.M, groups) if groups > 1 else (float("nan"), float("nan"))
    print(f"{mode} map {src} x {dst}: {cmap.M.shape[0]}x{cmap.M.shape[1]}")
    if groups > 1:
        print(f"block contrast (g={groups}): off-block {off:.5f}  in-block {on:.5f}  ratio {off / on:.4f}")
    if args.out:
        analysis.render_heatmap(cmap, args.out)
        print(f"heatmap written to {args.out}")
    if args.csv:
        np.savetxt(args.csv, cmap.M, delimiter=",", fmt="%.8g")
    return 0


def cmd_bench(args) -> int:
    dims = tuple(int(v) for v in args.dims.split(","))
    if len(dims) == 1:
        dims = dims * 3
    strategies = [s for s in args.strategies.split(",") if s]
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    results = bench_gemm(dims, args.batch, strategies, args.reps, seed=args.seed)
    for r in results:
        print(f"{r.strategy:<8} {r.batch} x {'x'.join(map(str, r.dims))}: median {r.median * 1e6:9.1f} us  "
              f"min {r.min * 1e6:9.1f} us  {r.throughput / 1e9:7.3f} GMAC/s  ({r.reps} reps)")
    same = len({r.checksum for r in results}) == 1
    print(f"outputs bitwise identical across strategies: {'yes' if same else 'NO'}")
    if args.out:
        rows = [r.row() for r in results]
        with open(args.out, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    return 0 if same else 1


# ----------------------------------------------------------------------
# parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="kernel threads (default: $ROOTCONV_THREADS or 1)")
    return p


def _net_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=ARCH_CHOICES, help="built-in architecture")
    p.add_argument("--spec", help="network JSON file (instead of --arch)")
    p.add_argument("--variant", default="baseline",
                   help="baseline, root-N, tree-N or column-N (default baseline)")
    p.add_argument("--width", type=float, default=1.0, help="channel width multiplier")


def _data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="cifar10 or synth:<kind>:<seed>")
    p.add_argument("--data-dir", help="directory with the CIFAR-10 binary batches")
    p.add_argument("--subset", type=int, help="use only the first N images")
    p.add_argument("--synth-n", type=int, help="synthetic dataset size")
    p.add_argument("--synth-size", type=int, help="synthetic image side")
    p.add_argument("--synth-channels", type=int, help="synthetic channel count")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="rootconv", description="Grouped-convolution network toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("cost", parents=[common], help="per-layer FLOP and parameter report")
    _net_args(p)
    p.add_argument("--input-size", type=int, help="input image side")
    p.add_argument("--baseline", action="store_true", help="report ratios against the ungrouped network")
    p.add_argument("--strict", action="store_true", help="also charge batchnorm/relu/pool/add/softmax")
    p.add_argument("--exclude-bn", action="store_true", help="leave batchnorm scale/shift out of params")
    p.add_argument("--exclude-classifier", action="store_true", help="leave the classifier out")
    p.add_argument("--out", help="write the per-layer table as CSV")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("export", parents=[common], help="write a built-in architecture as JSON")
    _net_args(p)
    p.add_argument("--input-size", type=int, help="input image side")
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("transform", parents=[common], help="apply a grouping schedule to a network JSON")
    p.add_argument("--in", dest="input", required=True, help="input network JSON")
    p.add_argument("--topology", required=True, choices=("root", "tree", "column"))
    p.add_argument("--degree", required=True, type=int, help="grouping degree (power of two >= 2)")
    p.add_argument("--override", action="append", metavar="LAYER=G", help="per-layer group count")
    p.add_argument("--out", required=True, help="output network JSON")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("validate", parents=[common], help="check a network JSON for shape errors")
    p.add_argument("spec", help="network JSON file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", parents=[common], help="train with SGD and write a checkpoint")
    _net_args(p)
    _data_args(p)
    p.add_argument("--eval-data", help="dataset for per-epoch evaluation")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", default="0.01", help="learning rate or schedule like 0:0.1,20:0.01")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--augment", action="store_true", help="4-pixel pad, random crop and mirror")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--metrics", help="per-epoch metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--topk", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("covar", parents=[common], help="inter-layer covariance heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", required=True, help="two layer names, e.g. conv2c,conv3a")
    p.add_argument("--whiten", action="store_true", help="ZCA-whiten both layers first")
    p.add_argument("--correlation", action="store_true", help="per-channel variance-normalised map")
    p.add_argument("--noise", action="store_true",
                   help="drive the first layer with independent unit noise instead of images")
    p.add_argument("--groups", type=int, help="block count for the contrast summary")
    p.add_argument("--images", type=int, default=64, help="number of input images")
    _data_args(p, required=False)
    p.add_argument("--out", help="PGM heatmap path")
    p.add_argument("--csv", help="raw matrix as CSV")
    p.set_defaults(func=cmd_covar)

    p = sub.add_parser("bench", parents=[common], help="looped vs batched small GEMM timing")
    p.add_argument("--dims", default="16,16,16", help="m,k,n of each product (or one size)")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--out", help="CSV of timings")
    p.set_defaults(func=cmd_bench)
    parser.commands = dict(sub.choices)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # report against the subcommand so its usage line lists the valid flags
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    threads = args.threads if args.threads is not None else os.environ.get("ROOTCONV_THREADS")
    if threads is not None:
        set_threads(int(threads))
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"rootconv: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError, json.JSONDecodeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"rootconv: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
