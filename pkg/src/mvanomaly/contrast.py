"""Cross-modal contrastive alignment of refined patch features.

Two InfoNCE terms: one on the per-view similarity matrix between the
2D and 3D refined maps, one on the similarity of their adjacent-view
differentials.  Rows are L2-normalized before either similarity matrix
is built (differentials are taken on raw maps first), which keeps the
logits in [-1, 1]; zero rows stay zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .datamodel import FeatureMap
from .errors import DegenerateInputWarning, DimensionMismatchError, ShapeMismatchError


@dataclass(frozen=True)
class AlignmentLossReport:
    l_view: float
    l_diff: Optional[float]
    l_total: float
    per_view: tuple
    per_pair: tuple


def _rows(entry) -> np.ndarray:
    if isinstance(entry, FeatureMap):
        return np.asarray(entry.features, dtype=np.float64)
    return np.asarray(entry, dtype=np.float64)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return np.where(norms > 0, a / np.where(norms > 0, norms, 1.0), 0.0)


def semantic_similarity_matrix(f2d, f3d) -> np.ndarray:
    """P x P similarity between row-normalized per-modality maps."""
    a = _rows(f2d)
    b = _rows(f3d)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(
            f"modality dims differ ({a.shape[1]} vs {b.shape[1]}); "
            "contrastive alignment needs equal dims"
        )
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(
            f"patch counts differ ({a.shape[0]} vs {b.shape[0]})"
        )
    return _unit_rows(a) @ _unit_rows(b).T


def infonce_rowwise(sim: np.ndarray) -> float:
    """Mean over rows of -(diagonal - logsumexp of the row)."""
    sim = np.asarray(sim, dtype=np.float64)
    row_max = sim.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(sim - row_max).sum(axis=1))
    diag = np.diagonal(sim)
    return float(np.mean(lse - diag))


def differential_features(f_next, f_cur) -> np.ndarray:
    a = _rows(f_next)
    b = _rows(f_cur)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"differential shapes differ: {a.shape} vs {b.shape}")
    return a - b


def contrastive_loss(refined: Sequence) -> AlignmentLossReport:
    """Combined view-wise and differential InfoNCE over one sample.

    ``refined``: per view, a (2d, 3d) pair of refined maps.  The view
    term averages over all I views; the differential term averages over
    the I-1 consecutive pairs without wrapping.  With a single view the
    differential term is absent and counted as 0.
    """
    f2d = [_rows(pair[0]) for pair in refined]
    f3d = [_rows(pair[1]) for pair in refined]
    n_views = len(f2d)
    per_view = tuple(
        infonce_rowwise(semantic_similarity_matrix(f2d[i], f3d[i]))
        for i in range(n_views)
    )
    l_view = float(np.mean(per_view))
    if n_views < 2:
        warnings.warn(
            "single view: differential alignment term is undefined, using 0",
            DegenerateInputWarning,
        )
        per_pair = ()
        l_diff = None
        l_total = l_view
    else:
        per_pair = tuple(
            infonce_rowwise(
                semantic_similarity_matrix(
                    differential_features(f2d[i + 1], f2d[i]),
                    differential_features(f3d[i + 1], f3d[i]),
                )
            )
            for i in range(n_views - 1)
        )
        l_diff = float(np.mean(per_pair))
        l_total = l_view + l_diff
    return AlignmentLossReport(
        l_view=l_view, l_diff=l_diff, l_total=l_total,
        per_view=per_view, per_pair=per_pair,
    )
