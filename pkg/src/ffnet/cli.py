"""``ffnet`` command line: profile, bench, segment, eval."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import kernels as K
from .analysis import profile
from .bench import benchmark
from .builder import build_model
from .config import ConfigError, load_config
from .runtime import InferenceSession
from .segtool import (IGNORE_INDEX, Image, colorize, confusion_matrix, iou_from_confusion,
                      preprocess, read_image, write_image)
from .weights import WeightError, load_weights


def parse_hw(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def cmd_profile(args) -> int:
    cfg = load_config(args.config)
    h, w = args.input or cfg.input_hw
    report = profile(build_model(cfg), (1, 3, h, w))
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_text() + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    report = benchmark(cfg, args.input or cfg.input_hw, iters=args.iters, warmup=args.warmup,
                       fold_bn=args.fold_bn, threads=args.threads, seed=args.seed)
    print(report.summary())
    if args.csv:
        report.write_csv(args.csv)
    return 0


def cmd_segment(args) -> int:
    cfg = load_config(args.config)
    img = read_image(args.image)
    x = preprocess(img, args.mean, args.std)
    graph = build_model(cfg)
    store = load_weights(args.weights)
    session = InferenceSession(graph, store, x.shape, permissive=args.permissive)
    logits = session.run(x).logits
    factor = img.height // logits.shape[2]
    if factor * logits.shape[2] != img.height or factor * logits.shape[3] != img.width:
        raise K.ShapeError(f"logits {logits.shape[2:]} do not evenly divide the image size")
    labels = K.argmax_channels(K.upsample(logits, factor, "bilinear"))[0].astype(np.uint8)
    write_image(args.out, colorize(labels))
    if args.classmap:
        write_image(args.classmap, Image(labels))
    print(f"{args.image} -> {args.out} ({cfg.name}, logits {tuple(logits.shape)})")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    names = sorted(p.name for p in pred_dir.glob("*.pgm"))
    if not names:
        raise FileNotFoundError(f"no .pgm files in {pred_dir}")
    cm = np.zeros((args.classes, args.classes), dtype=np.int64)
    for name in names:
        pred = read_image(pred_dir / name).pixels
        gt = read_image(gt_dir / name).pixels
        cm += confusion_matrix(pred, gt, args.classes, args.ignore)
    iou, mean = iou_from_confusion(cm)
    for c, v in enumerate(iou):
        print(f"class {c:3d}  IoU {'absent' if np.isnan(v) else f'{v:.4f}'}")
    print(f"mIoU {mean:.4f} over {int((~np.isnan(iou)).sum())} classes, {len(names)} images")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class", "iou"])
            for c, v in enumerate(iou):
                wr.writerow([c, "" if np.isnan(v) else f"{v:.6f}"])
            wr.writerow(["mean", f"{mean:.6f}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="per-node params/FLOPs/memory/receptive field")
    p.add_argument("--config", required=True)
    p.add_argument("--input", type=parse_hw, help="HxW, defaults to the config's input size")
    p.add_argument("--format", choices=("csv", "text"), default="text")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="batch-1 latency benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--input", type=parse_hw)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--fold-bn", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("segment", help="segment a P6 image")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True, help="FFNW weight file")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="colorized P6 output")
    p.add_argument("--classmap", help="optional P5 class-index output")
    p.add_argument("--mean", type=float, nargs=3, default=(0.485, 0.456, 0.406))
    p.add_argument("--std", type=float, nargs=3, default=(0.229, 0.224, 0.225))
    p.add_argument("--permissive", action="store_true", help="warn on unexpected weights")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="mIoU over matching P5 label maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--ignore", type=int, default=IGNORE_INDEX)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, WeightError, K.TensorError, ValueError, OSError) as exc:
        print(f"ffnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
