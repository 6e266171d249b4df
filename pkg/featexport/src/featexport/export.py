"""Export per-view patch features for every sample of a dataset.

Reads the multi-view dataset layout (per sample a ``meta.json`` and
``view_XX`` directories with ``image.ft32`` and ``depth.ft32``) and
writes, per sample, one feature directory the engine can consume:
``features_meta.json`` plus ``view_XX_2d.ft32`` / ``view_XX_3d.ft32``
tensors of shape P x d. Depth is min-max normalized per view over valid
(> 0) pixels before anything else; single-channel inputs are replicated
to three channels before the backbone sees them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbones import get_backbone, patch_grid
from .errors import ExportError, LayoutError
from .ft32 import read_ft32, write_ft32


@dataclass(frozen=True)
class ExportOptions:
    backbone: str = "patchlin"
    layer: str = "patch_embed"
    patch_px: int = 14
    d_2d: int = 32
    d_3d: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d_2d < 1 or self.d_3d < 1:
            raise ExportError("feature dims must be positive")


@dataclass(frozen=True)
class ExportManifest:
    backbone: str
    layer: str
    input_resolution: tuple  # (height, width)
    replicated_channels: bool
    n_views: int
    d_2d: int
    d_3d: int
    grid: dict  # rows, cols, patch_px
    files: tuple

    def to_json_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "layer": self.layer,
            "input_resolution": list(self.input_resolution),
            "replicated_channels": self.replicated_channels,
            "n_views": self.n_views,
            "d_2d": self.d_2d,
            "d_3d": self.d_3d,
            "grid": dict(self.grid),
            "files": list(self.files),
        }


def three_channels(plane: np.ndarray, path) -> tuple:
    """(H, W, 3) float64 plane plus whether channels were replicated."""
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise LayoutError(f"{path}: expected an image plane, got shape {arr.shape}")
    if arr.shape[2] == 3:
        return arr, False
    if arr.shape[2] == 1:
        return np.repeat(arr, 3, axis=2), True
    raise LayoutError(f"{path}: unsupported channel count {arr.shape[2]}")


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Min-max over valid (> 0) pixels; invalid pixels stay 0."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    out = np.zeros_like(depth)
    if not valid.any():
        return out
    lo = float(depth[valid].min())
    hi = float(depth[valid].max())
    if hi - lo < 1e-12:
        out[valid] = 0.5
    else:
        out[valid] = (depth[valid] - lo) / (hi - lo)
    return out


def export_sample(sample_dir, out_dir, options: ExportOptions) -> ExportManifest:
    sample_dir = Path(sample_dir)
    meta_path = sample_dir / "meta.json"
    if not meta_path.is_file():
        raise LayoutError(f"{sample_dir}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    n_views = int(meta.get("I", 0))
    if n_views < 1:
        raise LayoutError(f"{sample_dir}: meta.json declares no views")
    backbone = get_backbone(options.backbone, options.patch_px, options.seed)
    if options.layer not in backbone.layers:
        raise ExportError(
            f"backbone {options.backbone!r} has no layer {options.layer!r}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolution = None
    replicated = False
    grid = None
    files = []
    for k in range(1, n_views + 1):
        vdir = sample_dir / f"view_{k:02d}"
        if not vdir.is_dir():
            raise LayoutError(f"{sample_dir}: missing view_{k:02d}")
        image = read_ft32(vdir / "image.ft32")
        depth = read_ft32(vdir / "depth.ft32")
        if depth.ndim != 2:
            raise LayoutError(f"{vdir}: depth must be H x W, got {depth.shape}")
        if image.shape[:2] != depth.shape:
            raise LayoutError(
                f"{vdir}: image {image.shape[:2]} and depth {depth.shape} disagree"
            )
        if resolution is None:
            resolution = depth.shape
            rows, cols = patch_grid(resolution[0], resolution[1], options.patch_px)
            grid = {"rows": rows, "cols": cols, "patch_px": options.patch_px}
        elif depth.shape != resolution:
            raise LayoutError(
                f"{vdir}: resolution {depth.shape} differs from view_01 "
                f"{resolution}"
            )
        plane_2d, rep_2d = three_channels(image, vdir / "image.ft32")
        plane_3d = np.repeat(normalize_depth(depth)[:, :, None], 3, axis=2)
        # the flag reports the image stream; depth is single-channel by
        # definition and always replicated
        replicated = replicated or rep_2d
        streams = (("2d", plane_2d, options.d_2d, 0),
                   ("3d", plane_3d, options.d_3d, 1))
        for modality, plane, dim, stream in streams:
            feats = backbone.embed(plane, dim, stream)
            if feats.shape != (grid["rows"] * grid["cols"], dim):
                raise ExportError(
                    f"backbone returned {feats.shape}, expected "
                    f"({grid['rows'] * grid['cols']}, {dim})"
                )
            fname = f"view_{k:02d}_{modality}.ft32"
            write_ft32(out_dir / fname, feats)
            files.append(fname)

    manifest = ExportManifest(
        backbone=options.backbone,
        layer=options.layer,
        input_resolution=tuple(int(x) for x in resolution),
        replicated_channels=replicated,
        n_views=n_views,
        d_2d=options.d_2d,
        d_3d=options.d_3d,
        grid=grid,
        files=tuple(files),
    )
    (out_dir / "features_meta.json").write_text(
        json.dumps(manifest.to_json_dict(), indent=2, sort_keys=True)
    )
    return manifest


def export_dataset(dataset_dir, out_dir, options: ExportOptions,
                   splits=("train", "test")) -> dict:
    """Export every sample of each present split; {(split, id): manifest}."""
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise LayoutError(f"{dataset_dir}: not a directory")
    out = {}
    for split in splits:
        split_dir = dataset_dir / split
        if not split_dir.is_dir():
            continue
        for sample_dir in sorted(split_dir.iterdir()):
            if not (sample_dir / "meta.json").is_file():
                continue
            manifest = export_sample(
                sample_dir, Path(out_dir) / split / sample_dir.name, options
            )
            out[(split, sample_dir.name)] = manifest
    if not out:
        raise LayoutError(f"{dataset_dir}: no samples found in {splits}")
    return out
