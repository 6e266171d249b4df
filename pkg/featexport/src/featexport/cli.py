"""Command line front end: featexport <dataset> <out> [options]."""

from __future__ import annotations

import argparse
import sys

from .backbones import BACKBONES
from .errors import ExportError
from .export import ExportOptions, export_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featexport",
        description="Export per-view patch features into the FT32 layout.",
    )
    parser.add_argument("dataset", help="dataset root (train/ and test/ splits)")
    parser.add_argument("out", help="output root for feature directories")
    parser.add_argument("--backbone", default="patchlin",
                        choices=sorted(BACKBONES))
    parser.add_argument("--layer", default="patch_embed")
    parser.add_argument("--patch-px", type=int, default=14)
    parser.add_argument("--dim-2d", type=int, default=32)
    parser.add_argument("--dim-3d", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--splits", default="train,test",
                        help="comma-separated split directories to export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    options = ExportOptions(
        backbone=args.backbone, layer=args.layer, patch_px=args.patch_px,
        d_2d=args.dim_2d, d_3d=args.dim_3d, seed=args.seed,
    )
    splits = tuple(s for s in args.splits.split(",") if s)
    try:
        manifests = export_dataset(args.dataset, args.out, options, splits)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for (split, sample_id), manifest in sorted(manifests.items()):
        grid = manifest.grid
        print(f"{split}/{sample_id}: {manifest.n_views} views, "
              f"{grid['rows']}x{grid['cols']} patches")
    return 0


if __name__ == "__main__":
    sys.exit(main())
