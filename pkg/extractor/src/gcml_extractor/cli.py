"""Command-line exporter: image folder -> GCT1 bundle."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from .export import ExportOptions, build_model, extract, list_class_folders


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"grid must look like 5x5, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcml-extract",
        description="Export CNN feature stacks and head weights as a GCT1 bundle",
    )
    parser.add_argument("--images", required=True,
                        help="folder with one subfolder of images per class")
    parser.add_argument("--out", required=True, help="bundle output directory")
    parser.add_argument("--model", default="toy",
                        choices=["toy", "resnet18", "resnet50"])
    parser.add_argument("--checkpoint", default=None,
                        help="state dict to load into the model")
    parser.add_argument("--layer", default=None,
                        help="named module to capture (model default if omitted)")
    parser.add_argument("--grid", type=_parse_grid, default=(5, 5), metavar="HxW")
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--normalize", choices=["imagenet", "none"], default="imagenet")
    parser.add_argument("--seed", type=int, default=0,
                        help="parameter seed for the toy model")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        classes = [name for name, _ in list_class_folders(args.images)]
        model, default_layer = build_model(
            args.model, num_classes=len(classes), seed=args.seed,
            checkpoint=args.checkpoint,
        )
        options = ExportOptions(
            layer=args.layer or default_layer,
            grid=args.grid,
            image_size=args.image_size,
            normalize=args.normalize,
        )
        bundle = extract(model, options.layer, args.images, options, args.out)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"exported {len(bundle.sample_files)} stacks for classes {bundle.classes}")
    print(f"wrote {bundle.dataset_manifest} and {bundle.head_manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
