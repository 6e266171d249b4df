"""Calibrated cross-view patch correspondence and the alignment penalty.

Each patch center with valid depth is unprojected to world space and
reprojected into the neighboring views.  A projection survives only if
it lands inside the image and the patch grid and passes a relative
depth-consistency occlusion test against the target view's depth map.
The penalty is the mean L2 distance between refined features at the
surviving patch pairs; it depends on geometry and features only, never
on learnable parameters, so correspondence sets are computed once per
sample and can be cached on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datamodel import (
    OUT_OF_GRID,
    FeatureMap,
    PatchGrid,
    ViewSet,
    patch_of_pixel,
)
from .errors import ConfigError, DataError
from .tensorio import read_tensor, write_tensor

DEFAULT_DEPTH_TOL = 0.02

_REASONS = ("out_of_bounds", "occluded", "no_depth")


def neighbor_set(i: int, n_views: int, n_neighbors: int, cyclic: bool = True) -> tuple:
    """Neighboring view indices of 1-based view ``i``.

    Order follows the offsets -N..-1, +1..+N.  Cyclic wraps modulo the
    view count; non-cyclic drops indices outside [1, n_views].
    """
    if not 1 <= i <= n_views:
        raise ConfigError(f"view index {i} outside 1..{n_views}")
    if n_neighbors < 1:
        raise ConfigError("neighborhood size must be at least 1")
    out = []
    offsets = list(range(-n_neighbors, 0)) + list(range(1, n_neighbors + 1))
    for off in offsets:
        j = i + off
        if cyclic:
            j = (j - 1) % n_views + 1
            if j != i and j not in out:
                out.append(j)
        elif 1 <= j <= n_views:
            out.append(j)
    return tuple(out)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Accepted patch pairs per ordered view pair, plus rejection tallies.

    ``pairs[(i, j)]`` is an int array (n, 2) of 0-based (p, q) patch
    indices; keys are 0-based ordered view pairs.  ``rejections[(i, j)]``
    counts the discarded projections by reason; ``rejected_indices``
    holds the source patch ids behind those counts (None when loaded
    from a cache file, which stores counts only).
    """

    n_views: int
    grid: PatchGrid
    n_neighbors: int
    cyclic: bool
    depth_tol: float
    pairs: dict
    rejections: dict
    rejected_indices: Optional[dict] = None

    def pair_count(self) -> int:
        return sum(len(v) for v in self.pairs.values())


def compute_correspondences(
    viewset: ViewSet,
    grid: PatchGrid,
    n_neighbors: int = 2,
    depth_tol: float = DEFAULT_DEPTH_TOL,
    cyclic: bool = True,
) -> CorrespondenceSet:
    """Project patch centers of each view into its neighbor views.

    Rejection reasons: ``no_depth`` (no valid depth at the source center
    or the landing pixel), ``out_of_bounds`` (behind the camera, outside
    the image, or off the patch grid), ``occluded`` (depth mismatch
    beyond ``depth_tol`` relative).
    """
    views = viewset.views
    n_views = len(views)
    height = views[0].height
    width = views[0].width
    n_patches = grid.n_patches

    centers = np.array(
        [grid.patch_center_pixel(p) for p in range(n_patches)], dtype=np.int64
    )
    center_cont = centers.astype(np.float64) + 0.5

    pairs = {}
    rejections = {}
    rejected_indices = {}
    for i0 in range(n_views):
        view_i = views[i0]
        depth_i = view_i.depth
        src_depth = depth_i[centers[:, 1], centers[:, 0]].astype(np.float64)
        has_depth = src_depth > 0
        world = view_i.camera.unproject(center_cont, src_depth)
        for j1 in neighbor_set(i0 + 1, n_views, n_neighbors, cyclic):
            j0 = j1 - 1
            view_j = views[j0]
            rejected = {reason: [] for reason in _REASONS}
            uv_j, z_j = view_j.camera.project(world)
            cols = np.floor(uv_j[:, 0]).astype(np.int64)
            rows = np.floor(uv_j[:, 1]).astype(np.int64)
            accepted = []
            for p in range(n_patches):
                if not has_depth[p]:
                    rejected["no_depth"].append(p)
                    continue
                if z_j[p] <= 0:
                    rejected["out_of_bounds"].append(p)
                    continue
                u, v = cols[p], rows[p]
                if not (0 <= u < width and 0 <= v < height):
                    rejected["out_of_bounds"].append(p)
                    continue
                q = patch_of_pixel(grid, int(u), int(v))
                if q == OUT_OF_GRID:
                    rejected["out_of_bounds"].append(p)
                    continue
                depth_at = float(view_j.depth[v, u])
                if depth_at <= 0:
                    rejected["no_depth"].append(p)
                    continue
                if abs(z_j[p] - depth_at) > depth_tol * z_j[p]:
                    rejected["occluded"].append(p)
                    continue
                accepted.append((p, q))
            pairs[(i0, j0)] = (
                np.array(accepted, dtype=np.int64)
                if accepted
                else np.zeros((0, 2), dtype=np.int64)
            )
            rejections[(i0, j0)] = {r: len(v) for r, v in rejected.items()}
            rejected_indices[(i0, j0)] = {
                r: np.array(v, dtype=np.int64) for r, v in rejected.items()
            }
    return CorrespondenceSet(
        n_views=n_views,
        grid=grid,
        n_neighbors=n_neighbors,
        cyclic=cyclic,
        depth_tol=depth_tol,
        pairs=pairs,
        rejections=rejections,
        rejected_indices=rejected_indices,
    )


def _rows(entry) -> np.ndarray:
    if isinstance(entry, FeatureMap):
        return np.asarray(entry.features, dtype=np.float64)
    return np.asarray(entry, dtype=np.float64)


def geometric_loss(refined: Sequence, corr: CorrespondenceSet) -> float:
    """Mean refined-feature distance over corresponding patch pairs.

    Per ordered view pair: mean over modalities of the mean pairwise L2
    distance.  Per view: mean over neighbor views with nonempty pair
    sets (empty ones are skipped, not averaged as zero).  Overall: mean
    over all views.
    """
    per_mod = list(zip(*[(_rows(p[0]), _rows(p[1])) for p in refined]))
    n_views = corr.n_views
    total = 0.0
    for i0 in range(n_views):
        terms = []
        for j1 in neighbor_set(i0 + 1, n_views, corr.n_neighbors, corr.cyclic):
            j0 = j1 - 1
            pq = corr.pairs.get((i0, j0))
            if pq is None or len(pq) == 0:
                continue
            mod_means = []
            for feats in per_mod:
                delta = feats[i0][pq[:, 0]] - feats[j0][pq[:, 1]]
                mod_means.append(float(np.linalg.norm(delta, axis=1).mean()))
            terms.append(float(np.mean(mod_means)))
        total += float(np.mean(terms)) if terms else 0.0
    return total / n_views


# ---------------------------------------------------------------------------
# on-disk cache


def save_correspondences(corr: CorrespondenceSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    quads = []
    for (i0, j0), pq in sorted(corr.pairs.items()):
        for p, q in pq:
            quads.append((i0, j0, p, q))
    arr = np.array(quads, dtype=np.float32).reshape(-1, 4)
    write_tensor(directory / "pairs.ft32", arr)
    header = {
        "n_views": corr.n_views,
        "grid": {"rows": corr.grid.rows, "cols": corr.grid.cols,
                 "patch_px": corr.grid.patch_px},
        "n_neighbors": corr.n_neighbors,
        "cyclic": corr.cyclic,
        "depth_tol": corr.depth_tol,
        "rejections": {
            f"{i0},{j0}": counts for (i0, j0), counts in sorted(corr.rejections.items())
        },
    }
    (directory / "pairs.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_correspondences(directory) -> CorrespondenceSet:
    directory = Path(directory)
    header_path = directory / "pairs.json"
    if not header_path.is_file():
        raise DataError(f"no correspondence cache under {directory}")
    header = json.loads(header_path.read_text())
    arr = read_tensor(directory / "pairs.ft32")
    quads = arr.reshape(-1, 4).astype(np.int64)
    grid = PatchGrid(**header["grid"])
    n_views = header["n_views"]
    pairs = {}
    rejections = {}
    grouped = {}
    for i0, j0, p, q in quads:
        grouped.setdefault((int(i0), int(j0)), []).append((int(p), int(q)))
    for key, counts in header["rejections"].items():
        i0, j0 = (int(x) for x in key.split(","))
        rejections[(i0, j0)] = counts
        entries = grouped.get((i0, j0), [])
        pairs[(i0, j0)] = (
            np.array(entries, dtype=np.int64)
            if entries
            else np.zeros((0, 2), dtype=np.int64)
        )
    return CorrespondenceSet(
        n_views=n_views,
        grid=grid,
        n_neighbors=header["n_neighbors"],
        cyclic=header["cyclic"],
        depth_tol=header["depth_tol"],
        pairs=pairs,
        rejections=rejections,
    )
