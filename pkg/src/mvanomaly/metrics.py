"""Detection and localization metrics.

AUROC uses the rank formulation with ties counted half.  AUPRO sweeps
every distinct score (exact curve), integrates per-region overlap
against global false-positive rate up to a limit, and normalizes by the
limit.  The point-projected variant lifts per-pixel scores onto a fused
voxel grid and repeats the same computation with 6-connected voxel
regions; reports label it "pV-AUPRO" because it approximates a
voxel-level protocol whose official tooling is not public.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .datamodel import ViewSet
from .errors import ConfigError, DataError
from .scoring import AnomalyResult

DEFAULT_LIMITS = (0.3, 0.01)
DEFAULT_VOXEL_SIZE = 0.05


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    labels = np.concatenate(
        [(np.asarray(m) > 0).astype(np.int64).ravel() for m in masks]
    )
    return auroc(scores, labels)


# ---------------------------------------------------------------------------
# per-region overlap


def _pro_curve(neg_scores: np.ndarray, regions: Sequence[np.ndarray]):
    """(fpr, pro) arrays over all distinct thresholds, descending in t.

    A leading (0, 0) point anchors the curve at threshold above the
    global maximum.
    """
    if len(regions) == 0:
        raise DataError("per-region overlap needs at least one region")
    if len(neg_scores) == 0:
        raise DataError("per-region overlap needs negative pixels")
    all_scores = np.concatenate([neg_scores] + [np.asarray(r) for r in regions])
    thresholds = np.unique(all_scores)[::-1]
    neg_sorted = np.sort(neg_scores)
    n_neg = len(neg_sorted)
    fpr = (n_neg - np.searchsorted(neg_sorted, thresholds, side="left")) / n_neg
    pro = np.zeros(len(thresholds))
    for region in regions:
        reg_sorted = np.sort(np.asarray(region, dtype=np.float64))
        hits = len(reg_sorted) - np.searchsorted(reg_sorted, thresholds, side="left")
        pro += hits / len(reg_sorted)
    pro /= len(regions)
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], pro])


def _area_to_limit(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    if not 0.0 < limit <= 1.0:
        raise ConfigError(f"integration limit must lie in (0,1], got {limit}")
    inside = fpr <= limit
    fx = fpr[inside]
    fy = pro[inside]
    if fx[-1] < limit:
        # close the area with the interpolated point at the limit
        fx = np.append(fx, limit)
        fy = np.append(fy, np.interp(limit, fpr, pro))
    return float(np.trapezoid(fy, fx) / limit)


def _regions_2d(mask: np.ndarray, scores: np.ndarray):
    """Score arrays of the 4-connected components of a binary mask."""
    labeled, count = ndimage.label(np.asarray(mask) > 0)
    return [scores[labeled == r] for r in range(1, count + 1)]


def aupro(
    maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], limit: float = 0.3
) -> float:
    """Area under per-region overlap vs FPR, normalized by ``limit``."""
    regions = []
    negs = []
    for amap, mask in zip(maps, masks):
        scores = np.asarray(amap, dtype=np.float64)
        mask_arr = np.asarray(mask) > 0
        if scores.shape != mask_arr.shape:
            raise DataError(
                f"map shape {scores.shape} does not match mask {mask_arr.shape}"
            )
        regions.extend(_regions_2d(mask_arr, scores))
        negs.append(scores[~mask_arr])
    if not regions:
        raise DataError("AUPRO needs at least one anomalous region")
    fpr, pro = _pro_curve(np.concatenate(negs), regions)
    return _area_to_limit(fpr, pro, limit)


# ---------------------------------------------------------------------------
# point projection


@dataclass(frozen=True)
class PointCloudScores:
    """Voxel-fused projected scores for one sample.

    Scores average the contributing pixels of a voxel; ground truth is
    the union (max).  ``voxels`` are integer grid coordinates, ``centers``
    their world-space centers.
    """

    voxels: np.ndarray  # (N, 3) int64
    centers: np.ndarray  # (N, 3) float64
    scores: np.ndarray  # (N,)
    gt: np.ndarray  # (N,) int64
    pixel_counts: np.ndarray  # (N,)
    voxel_size: float


def project_scores_to_points(
    viewset: ViewSet,
    maps: Sequence[np.ndarray],
    voxel_size: float = DEFAULT_VOXEL_SIZE,
) -> PointCloudScores:
    """Unproject every valid-depth pixel and fuse duplicates per voxel."""
    if voxel_size <= 0:
        raise ConfigError("voxel size must be positive")
    pts = []
    scs = []
    gts = []
    for view, amap in zip(viewset.views, maps):
        depth = view.depth
        valid = depth > 0
        if not np.any(valid):
            continue
        vv, uu = np.nonzero(valid)
        uv = np.stack([uu + 0.5, vv + 0.5], axis=1)
        world = view.camera.unproject(uv, depth[valid].astype(np.float64))
        pts.append(world)
        scs.append(np.asarray(amap, dtype=np.float64)[valid])
        if view.gt_mask is not None:
            gts.append((view.gt_mask[valid] > 0).astype(np.int64))
        else:
            gts.append(np.zeros(valid.sum(), dtype=np.int64))
    if not pts:
        raise DataError(f"{viewset.sample_id}: no valid depth anywhere")
    world = np.concatenate(pts)
    scores = np.concatenate(scs)
    gt = np.concatenate(gts)
    voxels = np.floor(world / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(voxels, axis=0, return_inverse=True)
    n = len(uniq)
    sums = np.zeros(n)
    counts = np.zeros(n)
    gt_max = np.zeros(n, dtype=np.int64)
    np.add.at(sums, inverse, scores)
    np.add.at(counts, inverse, 1.0)
    np.maximum.at(gt_max, inverse, gt)
    return PointCloudScores(
        voxels=uniq,
        centers=(uniq + 0.5) * voxel_size,
        scores=sums / counts,
        gt=gt_max,
        pixel_counts=counts,
        voxel_size=voxel_size,
    )


def _voxel_regions(cloud: PointCloudScores):
    """Score arrays of 6-connected components among ground-truth voxels."""
    gt_idx = np.nonzero(cloud.gt > 0)[0]
    if len(gt_idx) == 0:
        return []
    coord_to_idx = {tuple(cloud.voxels[i]): i for i in gt_idx}
    seen = set()
    regions = []
    offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for start in gt_idx:
        key = tuple(cloud.voxels[start])
        if key in seen:
            continue
        stack = [key]
        seen.add(key)
        members = []
        while stack:
            cur = stack.pop()
            members.append(coord_to_idx[cur])
            for off in offsets:
                nxt = (cur[0] + off[0], cur[1] + off[1], cur[2] + off[2])
                if nxt in coord_to_idx and nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        regions.append(cloud.scores[np.array(members)])
    return regions


def point_aupro(clouds: Sequence[PointCloudScores], limit: float = 0.3) -> float:
    """AUPRO over fused voxels with 6-connected regions ("pV-AUPRO")."""
    regions = []
    negs = []
    for cloud in clouds:
        regions.extend(_voxel_regions(cloud))
        negs.append(cloud.scores[cloud.gt == 0])
    if not regions:
        raise DataError("point AUPRO needs at least one anomalous region")
    fpr, pro = _pro_curve(np.concatenate(negs), regions)
    return _area_to_limit(fpr, pro, limit)


# ---------------------------------------------------------------------------
# report assembly


@dataclass(frozen=True)
class EvalReport:
    i_auroc: float
    p_auroc: float
    aupro_at: dict  # limit (str) -> value
    pv_aupro_at: dict
    per_category: dict
    counts: dict
    voxel_size: float

    def to_json_dict(self) -> dict:
        return {
            "i_auroc": self.i_auroc,
            "p_auroc": self.p_auroc,
            "aupro": self.aupro_at,
            "pv_aupro": self.pv_aupro_at,
            "per_category": self.per_category,
            "counts": self.counts,
            "voxel_size": self.voxel_size,
        }


def _mask_for(view) -> np.ndarray:
    if view.gt_mask is not None:
        return view.gt_mask
    return np.zeros((view.height, view.width), dtype=np.float32)


def build_report(
    viewsets: Sequence[ViewSet],
    results: Sequence[AnomalyResult],
    limits: Sequence[float] = DEFAULT_LIMITS,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    categories: Optional[dict] = None,
) -> EvalReport:
    """Evaluate scored test samples against their ground truth.

    ``categories`` optionally maps sample_id to a defect category for the
    per-category breakdown (each category is ranked against all normals).
    """
    labels = [0 if vs.label == "normal" else 1 for vs in viewsets]
    sample_scores = [r.score for r in results]
    i_auroc = auroc(sample_scores, labels)

    all_maps = []
    all_masks = []
    for viewset, result in zip(viewsets, results):
        for view, amap in zip(viewset.views, result.maps):
            all_maps.append(amap)
            all_masks.append(_mask_for(view))
    p_auroc = pixel_auroc(all_maps, all_masks)
    aupro_at = {f"{limit:g}": aupro(all_maps, all_masks, limit) for limit in limits}

    clouds = [
        project_scores_to_points(vs, r.maps, voxel_size)
        for vs, r in zip(viewsets, results)
    ]
    pv_aupro_at = {f"{limit:g}": point_aupro(clouds, limit) for limit in limits}

    per_category = {}
    if categories:
        normal_scores = [s for s, l in zip(sample_scores, labels) if l == 0]
        by_cat = {}
        for viewset, score, label in zip(viewsets, sample_scores, labels):
            if label == 1:
                cat = categories.get(viewset.sample_id, "uncategorized")
                by_cat.setdefault(cat, []).append(score)
        for cat, cat_scores in sorted(by_cat.items()):
            per_category[cat] = {
                "i_auroc": auroc(
                    normal_scores + cat_scores,
                    [0] * len(normal_scores) + [1] * len(cat_scores),
                ),
                "n_samples": len(cat_scores),
            }

    counts = {
        "n_samples": len(viewsets),
        "n_anomalous": int(sum(labels)),
        "n_pixels": int(sum(m.size for m in all_maps)),
        "n_voxels": int(sum(len(c.voxels) for c in clouds)),
    }
    return EvalReport(
        i_auroc=i_auroc,
        p_auroc=p_auroc,
        aupro_at=aupro_at,
        pv_aupro_at=pv_aupro_at,
        per_category=per_category,
        counts=counts,
        voxel_size=voxel_size,
    )
