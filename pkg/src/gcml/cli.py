"""Command-line entry point: train, predict, eval, sweep, merge, heatmap.

All outputs are plain text (CSV, rendered matrices) except tensors and
stores, which use the binary container formats. Every command is
deterministic given explicit seeds; nothing depends on wall clock or
locale. Exit code 0 means all outputs were written and validated.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation, store as store_mod, tensorio
from .attention import BIT_ORDERS, GcmlConfig
from .cam import (
    POOLING_MODES,
    ClassifierHead,
    class_scores,
    compute_cam,
    load_head,
    minmax_normalize,
    upsample_bilinear,
)
from .store import FALLBACK_POLICIES, GcmlStore, epoch_seed


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}") from e


def _parse_taus(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from e


def _load_inputs(args) -> tuple[tensorio.DatasetManifest, ClassifierHead]:
    dataset = tensorio.load_manifest(args.dataset)
    head = load_head(args.head)
    if args.pooling:
        head.pooling = args.pooling
    if head.num_classes != len(dataset.classes):
        raise ValueError(
            f"head has {head.num_classes} classes, dataset has {len(dataset.classes)}"
        )
    return dataset, head


def _infer_grid(dataset: tensorio.DatasetManifest) -> tuple[int, int]:
    if not dataset.samples:
        raise ValueError("cannot infer grid from an empty dataset")
    stack, _ = dataset.load_sample(0)
    return stack.shape[1], stack.shape[2]


def cmd_train(args) -> int:
    dataset, head = _load_inputs(args)
    grid = args.grid or _infer_grid(dataset)
    cfg = GcmlConfig(tau=args.tau, grid_h=grid[0], grid_w=grid[1], bit_order=args.bit_order)
    s = GcmlStore(classes=list(dataset.classes), cfg=cfg, pooling=head.pooling)
    for e in range(args.epochs):
        seed = None if args.seed is None else epoch_seed(args.seed, e)
        store_mod.train_epoch(s, dataset, head, augment_seed=seed)
    store_mod.save_store(s, args.out)
    for label, total in zip(s.classes, s.row_totals):
        print(f"{label}: {total}")
    print(f"wrote {args.out}")
    return 0


def _prediction_header(classes: list[str]) -> list[str]:
    return (
        ["path", "true_label", "gcml_class", "cnn_class", "fallback_used"]
        + [f"key:{c}" for c in classes]
        + [f"likelihood:{c}" for c in classes]
    )


def cmd_predict(args) -> int:
    dataset, head = _load_inputs(args)
    s = store_mod.load_store(args.store)
    if s.classes != dataset.classes:
        raise ValueError("store class list does not match dataset manifest")
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_prediction_header(s.classes))
        for index in range(len(dataset)):
            stack, label = dataset.load_sample(index)
            pred = store_mod.predict(stack, head, s, alpha=args.alpha, fallback=args.fallback)
            cnn_class = int(np.argmax(class_scores(stack, head)))
            writer.writerow(
                [dataset.samples[index][0], label, pred.class_index, cnn_class,
                 int(pred.fallback_used)]
                + [str(k) for k in pred.keys]
                + [format(v, ".10g") for v in pred.likelihoods]
            )
    print(f"wrote {args.out}")
    return 0


def _predictions_from_csv(path: str) -> tuple[list[int], list[int]]:
    preds, truth = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            preds.append(int(row["gcml_class"]))
            truth.append(int(row["true_label"]))
    return preds, truth


def cmd_eval(args) -> int:
    dataset = tensorio.load_manifest(args.dataset)
    if args.predictions:
        preds, truth = _predictions_from_csv(args.predictions)
    else:
        if not (args.head and args.store):
            raise ValueError("eval needs either --predictions or both --head and --store")
        head = load_head(args.head)
        if args.pooling:
            head.pooling = args.pooling
        s = store_mod.load_store(args.store)
        if s.classes != dataset.classes:
            raise ValueError("store class list does not match dataset manifest")
        preds, truth = [], []
        for index in range(len(dataset)):
            stack, label = dataset.load_sample(index)
            pred = store_mod.predict(stack, head, s, alpha=args.alpha, fallback=args.fallback)
            preds.append(pred.class_index)
            truth.append(label)
    cm = evaluation.confusion(preds, truth, len(dataset.classes))
    report = evaluation.metrics(cm)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(
        evaluation.metrics_csv(report, dataset.classes), encoding="utf-8"
    )
    (out_dir / "confusion.txt").write_text(
        evaluation.render_confusion(cm, dataset.classes), encoding="utf-8"
    )
    print(f"accuracy: {report.accuracy.point:.10g}")
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'confusion.txt'}")
    return 0


def cmd_sweep(args) -> int:
    dataset, head = _load_inputs(args)
    eval_dataset = tensorio.load_manifest(args.eval_dataset) if args.eval_dataset else None
    result = evaluation.tau_sweep(
        dataset,
        head,
        args.taus,
        epochs=args.epochs,
        eval_dataset=eval_dataset,
        augment_seed=args.seed,
        alpha=args.alpha,
        fallback=args.fallback,
        bit_order=args.bit_order,
    )
    def fmt_tau(tau: float) -> str:
        # taus live as float32; print their shortest round-trip form
        return np.format_float_positional(np.float32(tau), unique=True, trim="-")

    lines = ["tau,accuracy"]
    for row in result.rows:
        lines.append(f"{fmt_tau(row.tau)},{row.accuracy:.10g}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best_tau: {fmt_tau(result.best_tau)}")
    print(f"wrote {args.out}")
    return 0


def cmd_merge(args) -> int:
    stores = [store_mod.load_store(p) for p in args.stores]
    merged = stores[0]
    for other in stores[1:]:
        merged = store_mod.merge(merged, other)
    store_mod.save_store(merged, args.out)
    print(f"wrote {args.out} ({merged.total_count()} counts)")
    return 0


def cmd_heatmap(args) -> int:
    dataset, head = _load_inputs(args)
    if not 0 <= args.class_index < head.num_classes:
        raise ValueError(f"class index {args.class_index} out of range")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for index in range(len(dataset)):
        stack, _ = dataset.load_sample(index)
        m = compute_cam(stack, head, args.class_index)
        if args.normalize:
            m = minmax_normalize(m)
        heat = upsample_bilinear(m, args.size[0], args.size[1])
        stem = Path(dataset.samples[index][0]).stem
        tensorio.save_tensor(heat, out_dir / f"{stem}_heatmap.gct")
        written += 1
    print(f"wrote {written} heatmaps to {out_dir}")
    return 0


def _add_common(p: argparse.ArgumentParser, *, head_required: bool = True) -> None:
    p.add_argument("--dataset", required=True, help="dataset manifest (JSON)")
    p.add_argument("--head", required=head_required, help="head manifest (JSON)")
    p.add_argument("--pooling", choices=POOLING_MODES, default=None,
                   help="override the head manifest's pooling mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcml",
        description="Bit-pattern attention over class activation maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="count attention keys over a labeled dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output store file")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--grid", type=_parse_grid, default=None, metavar="HxW")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None,
                   help="enable jitter augmentation with this seed")
    p.add_argument("--bit-order", choices=BIT_ORDERS, default="little")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-sample store and pooled-score classes")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="output predictions CSV")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--fallback", choices=FALLBACK_POLICIES, default="cnn")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics report and confusion matrix")
    _add_common(p, head_required=False)
    p.add_argument("--predictions", default=None, help="predictions CSV from `predict`")
    p.add_argument("--store", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--fallback", choices=FALLBACK_POLICIES, default="cnn")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and score one store per threshold")
    _add_common(p)
    p.add_argument("--taus", type=_parse_taus, required=True, metavar="T1,T2,...")
    p.add_argument("--eval-dataset", default=None, help="held-out manifest")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--fallback", choices=FALLBACK_POLICIES, default="cnn")
    p.add_argument("--bit-order", choices=BIT_ORDERS, default="little")
    p.add_argument("--out", required=True, help="output sweep CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="add counts of compatible stores")
    p.add_argument("--out", required=True)
    p.add_argument("stores", nargs="+", help="input store files")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("heatmap", help="upsampled activation maps as GCT1 tensors")
    _add_common(p)
    p.add_argument("--class-index", type=int, required=True)
    p.add_argument("--size", type=_parse_grid, required=True, metavar="HxW")
    p.add_argument("--normalize", action="store_true",
                   help="min-max normalize maps before upsampling")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
