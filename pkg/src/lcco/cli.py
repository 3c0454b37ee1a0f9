"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .records import DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcco", description="CLIP-guided image co-segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--steps", type=int, help="override train.steps")

    e = sub.add_parser("eval", help="evaluate a checkpoint (P and J)")
    e.add_argument("--config", required=True, type=Path)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--n-eval", type=int, help="images per evaluation set")
    e.add_argument("--report", type=Path, help="report path (default: <output_dir>/eval_report_n<N>.json)")

    i = sub.add_parser("infer", help="co-segment a directory of images")
    i.add_argument("--images", required=True, type=Path)
    i.add_argument("--checkpoint", required=True, type=Path)
    i.add_argument("--out", required=True, type=Path)
    i.add_argument("--overlay", action="store_true", help="also write red-tinted overlays")
    i.add_argument("--config", type=Path, help="override the checkpoint's config snapshot")

    r = sub.add_parser("record-fixtures", help="record CLIP embeddings into a fixture file")
    r.add_argument("--images", required=True, type=Path,
                   help="an image directory, or a set directory with images/ (and masks/)")
    r.add_argument("--prompts", required=True, type=Path, help="text file, one prompt per line")
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--backend", choices=("hash", "real"), default="hash")
    r.add_argument("--dim", type=int, default=512, help="vector width for the hash backend")
    r.add_argument("--size", type=int, help="resize images to SIZE x SIZE before keying")

    m = sub.add_parser("make-toy", help="write a synthetic dataset, fixtures and config")
    m.add_argument("--out", required=True, type=Path)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--n", type=int, default=5)
    m.add_argument("--dim", type=int, default=32)
    m.add_argument("--steps", type=int, default=300)
    return p


def _record(args) -> int:
    from . import dataio
    from .clip_provider import build_clip, record_fixtures

    prompts = [ln.strip() for ln in args.prompts.read_text().splitlines() if ln.strip()]
    size = (args.size, args.size) if args.size else None
    root = args.images
    images = []
    if (root / "images").is_dir():
        s = dataio.load_image_set(root, size)
        images = list(s.images)
        if s.gt_masks is not None:
            images += list(s.images * s.gt_masks)
    else:
        images = [dataio.read_rgb(p, size) for p in dataio.list_images(root)]
    if not images:
        raise DataError(f"no images found under {root}")
    encoder = build_clip("real") if args.backend == "real" else None
    store = record_fixtures(images, prompts, args.out, dim=args.dim, encoder=encoder)
    print(f"wrote {len(store)} embeddings (width {store.dim}) to {args.out}")
    return EXIT_OK


def _make_toy(args) -> int:
    from .backbone import BackboneSpec
    from .config import ClipConfig, ExperimentConfig
    from .records import TrainConfig
    from .toy import write_toy_dataset

    vocab = ["red disk", "green disk", "blue disk", "yellow disk", "cat", "dog"]
    write_toy_dataset(args.out, vocab, classes=(0, 1, 2), n=args.n, size=args.size, dim=args.dim)
    cfg = ExperimentConfig(
        train=TrainConfig(prompt_vocabulary=vocab, k=3, set_size_train=args.n, steps=args.steps, lr=3e-3),
        clip=ClipConfig(backend="fixture", fixtures="fixtures.npz", fixture_mode="strict", dim=args.dim),
        input_size=(args.size, args.size), backbone=BackboneSpec(identity="stub"),
        train_manifest="manifest.txt", eval_manifests={"toy": "manifest.txt"}, n_eval=args.n,
        output_dir="run",
    )
    cfg.save(args.out / "config.yaml")
    print(f"toy dataset in {args.out}; train with: lcco train --config {args.out / 'config.yaml'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from .config import ExperimentConfig
        from . import harness

        if args.command == "train":
            cfg = ExperimentConfig.load(args.config)
            ckpt = harness.train(cfg, steps=args.steps)
            print(ckpt)
        elif args.command == "eval":
            cfg = ExperimentConfig.load(args.config)
            report = harness.evaluate(cfg, args.checkpoint, args.n_eval, args.report)
            print(json.dumps(report.datasets, indent=2))
        elif args.command == "infer":
            cfg = ExperimentConfig.load(args.config) if args.config else None
            written = harness.infer(args.images, args.checkpoint, args.out, args.overlay, cfg)
            print(f"wrote {len(written)} masks to {args.out}")
        elif args.command == "record-fixtures":
            return _record(args)
        elif args.command == "make-toy":
            return _make_toy(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
