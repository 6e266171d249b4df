"""Memory bank construction and nearest-neighbor anomaly scoring.

Normal samples run through the same extract/select/refine pipeline as
training; their per-patch 2D and 3D refined features are fused by
channel concatenation (2D block first) and stored as bank rows.  A test
patch scores as the exact L2 distance to its nearest bank row.  Patch
grids become pixel maps by bilinear upsampling and Gaussian smoothing;
view and sample scores are maxima over the smoothed maps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist

from .datamodel import PatchGrid, ViewSet
from .errors import ConfigError, DataError, DimensionMismatchError, ShapeMismatchError
from .features import FeatureConfig, extract_viewset_features
from .refine import ProjectionParams, refine_sample, select_candidates
from .tensorio import read_tensor, write_tensor

DEFAULT_SIGMA = 4.0


def fuse(f2d: np.ndarray, f3d: np.ndarray) -> np.ndarray:
    """Channel-wise concatenation per patch, 2D block first."""
    f2d = np.asarray(f2d)
    f3d = np.asarray(f3d)
    if f2d.shape[0] != f3d.shape[0]:
        raise ShapeMismatchError(
            f"patch counts differ: {f2d.shape[0]} vs {f3d.shape[0]}"
        )
    return np.concatenate([f2d, f3d], axis=1)


def _select_blocks(r2: np.ndarray, r3: np.ndarray, modality: str) -> np.ndarray:
    if modality == "fused":
        return fuse(r2, r3)
    if modality == "2d":
        return np.asarray(r2)
    if modality == "3d":
        return np.asarray(r3)
    raise ConfigError(f"unknown scoring modality {modality!r}")


def refined_fused_rows(
    viewset: ViewSet,
    params: ProjectionParams,
    feat_config: FeatureConfig,
    alpha: float = 0.8,
    k: int = 8,
    cyclic: bool = True,
    residual: bool = False,
    modality: str = "fused",
) -> tuple:
    """(per-view rows, grid) through the full refinement pipeline.

    ``modality`` selects the stored blocks: "fused" concatenates both
    refined modalities (the default pipeline), "2d"/"3d" keep a single
    one for ablation.  Candidate selection always sees both modalities.
    """
    fmaps = extract_viewset_features(viewset, feat_config)
    candidates = select_candidates(fmaps, alpha=alpha, k=k, cyclic=cyclic)
    refined = refine_sample(fmaps, candidates, params, residual=residual)
    rows = [_select_blocks(r2.features, r3.features, modality) for r2, r3 in refined]
    return rows, fmaps[0][0].grid


@dataclass(frozen=True)
class MemoryBank:
    """Fused normal-feature rows plus per-row provenance."""

    entries: np.ndarray  # (M, d_2d + d_3d) float32
    provenance: tuple  # per row: (sample_id, view_index, patch)
    coreset_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.entries.ndim != 2 or len(self.entries) == 0:
            raise DataError("memory bank must hold at least one row")
        if len(self.provenance) != len(self.entries):
            raise DataError("provenance length must match bank size")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def coreset_select(entries: np.ndarray, ratio: float) -> np.ndarray:
    """Greedy farthest-point subset of ceil(ratio * M) row indices.

    Starts from the row farthest from the centroid; every tie prefers
    the lower index, making the selection deterministic.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"coreset ratio must lie in (0,1], got {ratio}")
    entries = np.asarray(entries, dtype=np.float64)
    m = len(entries)
    keep = math.ceil(ratio * m)
    centroid = entries.mean(axis=0)
    dist_c = np.linalg.norm(entries - centroid, axis=1)
    first = int(np.argmax(dist_c))  # argmax takes the first maximum
    selected = [first]
    min_dist = np.linalg.norm(entries - entries[first], axis=1)
    while len(selected) < keep:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        min_dist = np.minimum(
            min_dist, np.linalg.norm(entries - entries[nxt], axis=1)
        )
    return np.array(sorted(selected), dtype=np.int64)


def build_bank(
    viewsets: Sequence[ViewSet],
    params: ProjectionParams,
    feat_config: FeatureConfig,
    coreset_ratio: float = 1.0,
    alpha: float = 0.8,
    k: int = 8,
    cyclic: bool = True,
    residual: bool = False,
    modality: str = "fused",
) -> MemoryBank:
    """Insert every refined fused patch row of every normal sample."""
    if not viewsets:
        raise DataError("cannot build a memory bank from zero samples")
    rows = []
    provenance = []
    for viewset in viewsets:
        if viewset.label != "normal":
            raise DataError(
                f"bank accepts only normal samples, got label {viewset.label!r} "
                f"for {viewset.sample_id}"
            )
        fused, _ = refined_fused_rows(
            viewset, params, feat_config,
            alpha=alpha, k=k, cyclic=cyclic, residual=residual,
            modality=modality,
        )
        for view, block in zip(viewset.views, fused):
            rows.append(block)
            provenance.extend(
                (viewset.sample_id, view.view_index, p) for p in range(len(block))
            )
    entries = np.concatenate(rows, axis=0).astype(np.float32)
    coreset_indices = None
    if coreset_ratio < 1.0:
        coreset_indices = coreset_select(entries, coreset_ratio)
        entries = entries[coreset_indices]
        provenance = [provenance[i] for i in coreset_indices]
    return MemoryBank(
        entries=entries,
        provenance=tuple(provenance),
        coreset_indices=coreset_indices,
    )


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class AnomalyResult:
    sample_id: str
    label: str
    patch_scores: tuple  # per view: (P,) float64
    maps: tuple  # per view: (H, W) float32, smoothed
    view_scores: tuple
    score: float


def bilinear_upsample(grid_scores: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize treating cells as pixels (half-pixel centers)."""
    grid_scores = np.asarray(grid_scores, dtype=np.float64)
    in_h, in_w = grid_scores.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid_scores[y0][:, x0] * (1 - wx) + grid_scores[y0][:, x1] * wx
    bot = grid_scores[y1][:, x0] * (1 - wx) + grid_scores[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def render_map(
    patch_scores: np.ndarray,
    grid: PatchGrid,
    height: int,
    width: int,
    sigma: float = DEFAULT_SIGMA,
) -> np.ndarray:
    """Patch scores -> smoothed H x W anomaly map.

    The patch grid covers rows*patch_px x cols*patch_px; any cropped
    remainder is filled by edge replication before smoothing.
    """
    cells = np.asarray(patch_scores, dtype=np.float64).reshape(grid.rows, grid.cols)
    core = bilinear_upsample(cells, grid.rows * grid.patch_px, grid.cols * grid.patch_px)
    pad_v = height - core.shape[0]
    pad_h = width - core.shape[1]
    if pad_v or pad_h:
        core = np.pad(core, ((0, pad_v), (0, pad_h)), mode="edge")
    if sigma > 0:
        core = gaussian_filter(core, sigma=sigma)
    return core.astype(np.float32)


def score_sample(
    viewset: ViewSet,
    bank: MemoryBank,
    params: ProjectionParams,
    feat_config: FeatureConfig,
    alpha: float = 0.8,
    k: int = 8,
    cyclic: bool = True,
    residual: bool = False,
    sigma: float = DEFAULT_SIGMA,
    modality: str = "fused",
) -> AnomalyResult:
    """Exhaustive nearest-neighbor distances, rendered per-view maps."""
    fused, grid = refined_fused_rows(
        viewset, params, feat_config,
        alpha=alpha, k=k, cyclic=cyclic, residual=residual,
        modality=modality,
    )
    if fused[0].shape[1] != bank.dim:
        raise DimensionMismatchError(
            f"fused dim {fused[0].shape[1]} does not match bank dim {bank.dim}"
        )
    bank_rows = bank.entries.astype(np.float64)
    patch_scores = []
    maps = []
    for view, block in zip(viewset.views, fused):
        dists = cdist(block.astype(np.float64), bank_rows)
        scores = dists.min(axis=1)
        patch_scores.append(scores)
        maps.append(render_map(scores, grid, view.height, view.width, sigma=sigma))
    view_scores = tuple(float(m.max()) for m in maps)
    return AnomalyResult(
        sample_id=viewset.sample_id,
        label=viewset.label,
        patch_scores=tuple(patch_scores),
        maps=tuple(maps),
        view_scores=view_scores,
        score=float(max(view_scores)),
    )


# ---------------------------------------------------------------------------
# serialization


def save_bank(bank: MemoryBank, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "bank.ft32", bank.entries)
    meta = {
        "size": bank.size,
        "dim": bank.dim,
        "provenance": [
            {"sample_id": s, "view_index": v, "patch": p}
            for s, v, p in bank.provenance
        ],
        "coreset_indices": (
            bank.coreset_indices.tolist()
            if bank.coreset_indices is not None
            else None
        ),
    }
    (directory / "bank.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_bank(directory) -> MemoryBank:
    directory = Path(directory)
    meta_path = directory / "bank.json"
    if not meta_path.is_file():
        raise DataError(f"no bank.json under {directory}")
    meta = json.loads(meta_path.read_text())
    entries = read_tensor(directory / "bank.ft32")
    provenance = tuple(
        (e["sample_id"], e["view_index"], e["patch"]) for e in meta["provenance"]
    )
    coreset = meta.get("coreset_indices")
    return MemoryBank(
        entries=entries,
        provenance=provenance,
        coreset_indices=None if coreset is None else np.array(coreset, dtype=np.int64),
    )


def save_result(result: AnomalyResult, directory, write_pgm: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for view_idx, amap in enumerate(result.maps, start=1):
        write_tensor(directory / f"map_view_{view_idx:02d}.ft32", amap)
        if write_pgm:
            _write_pgm(directory / f"map_view_{view_idx:02d}.pgm", amap)
    payload = {
        "sample_id": result.sample_id,
        "label": result.label,
        "score": result.score,
        "view_scores": list(result.view_scores),
    }
    (directory / "scores.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True)
    )


def _write_pgm(path: Path, amap: np.ndarray) -> None:
    peak = float(amap.max())
    scaled = (amap / peak * 255.0).astype(np.uint8) if peak > 0 else np.zeros_like(
        amap, dtype=np.uint8
    )
    header = f"P5\n{amap.shape[1]} {amap.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + scaled.tobytes())
