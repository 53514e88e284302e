"""Command-line exporter: image folders -> TFRB token-feature files."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .extract import ExportConfig, SourceSpec, extract


def _parse_source(text: str) -> SourceSpec:
    # PATH:LABEL:TAG, e.g. data/real:0:megalith
    parts = text.rsplit(":", 2)
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"source must be PATH:LABEL:TAG, got {text!r}"
        )
    path, label, tag = parts
    if label not in ("0", "1"):
        raise argparse.ArgumentTypeError(f"label must be 0 or 1, got {label!r}")
    return SourceSpec(directory=path, label=int(label), tag=tag)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfrb-export",
        description="Run a frozen vision encoder over image folders and write "
                    "cls+patch token features to a TFRB file.",
    )
    parser.add_argument("--encoder", required=True,
                        help="toy-vit-p<P>-d<D>-l<L>[-s<S>] or hf-clip:<model-name>")
    parser.add_argument("--resolution", type=int, required=True)
    parser.add_argument("--source", action="append", required=True,
                        type=_parse_source, metavar="PATH:LABEL:TAG",
                        help="image directory with its label (0 real / 1 generated) "
                             "and source tag; repeatable")
    parser.add_argument("--out", required=True)
    parser.add_argument("--augment", action="store_true",
                        help="apply train-time JPEG/blur augmentations")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--batch-size", type=int, default=8)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = ExportConfig(
        encoder=args.encoder,
        resolution=args.resolution,
        sources=tuple(args.source),
        out_path=args.out,
        augment=args.augment,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    try:
        result = extract(config)
    except (EncoderError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {result.written} records (dim {result.dim}, "
          f"{result.tokens_per_record} tokens each) to {result.out_path}")
    if result.skipped:
        print(f"skipped {len(result.skipped)} unreadable file(s); see manifest")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
