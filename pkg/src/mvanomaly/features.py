"""Patch descriptors for both modalities.

The extractor is deliberately small: per-patch statistics plus the raw
pixel block, pushed through a fixed seeded random projection and tanh.
It is deterministic, needs no weights on disk, and keeps patch locality,
which is all the downstream stages require.  Depth is min-max normalized
per view over valid (> 0) pixels before patching, so the 3D descriptors
are invariant to the absolute camera distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import FeatureMap, PatchGrid, ViewObservation, ViewSet
from .errors import ConfigError, DataError, ShapeMismatchError
from .tensorio import read_tensor


@dataclass(frozen=True)
class FeatureConfig:
    patch_px: int = 8
    dim_2d: int = 16
    dim_3d: int = 16
    seed: int = 7

    def __post_init__(self):
        if self.patch_px < 2:
            raise ConfigError("patch_px must be at least 2")
        if self.dim_2d < 2 or self.dim_3d < 2:
            raise ConfigError("feature dims must be at least 2")

    def dim(self, modality: str) -> int:
        return self.dim_2d if modality == "2d" else self.dim_3d


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Min-max normalize over valid pixels; invalid (<= 0) pixels become 0."""
    valid = depth > 0
    out = np.zeros_like(depth, dtype=np.float64)
    if not np.any(valid):
        return out
    lo = float(depth[valid].min())
    hi = float(depth[valid].max())
    if hi - lo < 1e-12:
        out[valid] = 0.5
    else:
        out[valid] = (depth[valid] - lo) / (hi - lo)
    return out


def _patch_blocks(plane: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(P, patch_px * patch_px * C) row-major patch blocks, trailing rem cropped."""
    p = grid.patch_px
    c = plane.shape[2]
    cropped = plane[: grid.rows * p, : grid.cols * p]
    blocks = cropped.reshape(grid.rows, p, grid.cols, p, c)
    blocks = blocks.transpose(0, 2, 1, 3, 4)
    return blocks.reshape(grid.n_patches, p * p * c)


def _descriptors(plane: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Raw per-patch descriptor: [pixels | mean | std | gradient energy]."""
    flat = _patch_blocks(np.asarray(plane, dtype=np.float64), grid)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    p = grid.patch_px
    c = plane.shape[2]
    blocks = flat.reshape(-1, p, p, c)
    gx = np.abs(np.diff(blocks, axis=2)).mean(axis=(1, 2, 3), keepdims=False)
    gy = np.abs(np.diff(blocks, axis=1)).mean(axis=(1, 2, 3), keepdims=False)
    grad = (gx + gy).reshape(-1, 1)
    return np.concatenate([flat, mean, std, grad], axis=1)


def _projection(raw_dim: int, out_dim: int, seed: int, tag: int) -> np.ndarray:
    rng = np.random.default_rng([seed, tag, raw_dim, out_dim])
    return rng.standard_normal((raw_dim, out_dim)) / np.sqrt(raw_dim)


def extract_view_features(
    view: ViewObservation, config: FeatureConfig
) -> tuple[FeatureMap, FeatureMap]:
    """(2D feature map, 3D feature map) for one view."""
    grid = PatchGrid.for_image(view.height, view.width, config.patch_px)
    desc2d = _descriptors(view.image, grid)
    depth_plane = normalize_depth(view.depth)[:, :, None]
    desc3d = _descriptors(depth_plane, grid)
    w2d = _projection(desc2d.shape[1], config.dim_2d, config.seed, tag=0)
    w3d = _projection(desc3d.shape[1], config.dim_3d, config.seed, tag=1)
    feat2d = np.tanh(desc2d @ w2d).astype(np.float32)
    feat3d = np.tanh(desc3d @ w3d).astype(np.float32)
    return (
        FeatureMap(view_index=view.view_index, modality="2d", grid=grid,
                   features=feat2d),
        FeatureMap(view_index=view.view_index, modality="3d", grid=grid,
                   features=feat3d),
    )


def extract_viewset_features(
    viewset: ViewSet, config: FeatureConfig
) -> list[tuple[FeatureMap, FeatureMap]]:
    """Per-view (2D, 3D) feature maps in view order."""
    return [extract_view_features(v, config) for v in viewset.views]


# ---------------------------------------------------------------------------
# precomputed features (exported offline by an external backbone)


def load_precomputed_features(root) -> list[tuple[FeatureMap, FeatureMap]]:
    """Per-view (2D, 3D) feature maps from exported tensor files.

    ``root`` must hold ``features_meta.json`` plus one
    ``view_<k>_<modality>.ft32`` file per view and modality.  Every file
    is validated against the grid declared in the manifest; a row count
    other than rows*cols is a shape error, not a warning.
    """
    root = Path(root)
    meta_path = root / "features_meta.json"
    if not meta_path.is_file():
        raise DataError(f"no features_meta.json under {root}")
    meta = json.loads(meta_path.read_text())
    try:
        grid = PatchGrid(**meta["grid"])
        n_views = int(meta["n_views"])
        dims = {"2d": int(meta["d_2d"]), "3d": int(meta["d_3d"])}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{meta_path}: malformed manifest: {exc}") from exc
    out = []
    for k in range(1, n_views + 1):
        maps = {}
        for modality in ("2d", "3d"):
            path = root / f"view_{k:02d}_{modality}.ft32"
            if not path.is_file():
                raise DataError(f"missing exported features: {path}")
            feats = read_tensor(path)
            if feats.ndim != 2 or feats.shape[0] != grid.n_patches:
                raise ShapeMismatchError(
                    f"{path}: expected {grid.n_patches} x {dims[modality]} rows "
                    f"for the declared grid, got {feats.shape}"
                )
            if feats.shape[1] != dims[modality]:
                raise ShapeMismatchError(
                    f"{path}: dim {feats.shape[1]} does not match manifest "
                    f"d_{modality}={dims[modality]}"
                )
            maps[modality] = FeatureMap(
                view_index=k, modality=modality, grid=grid, features=feats
            )
        out.append((maps["2d"], maps["3d"]))
    return out
