from __future__ import annotations

import numpy as np
import pytest

from mvanomaly.datamodel import PatchGrid
from mvanomaly.geomalign import CorrespondenceSet, neighbor_set
from mvanomaly.synth import RingSpec, SceneSpec, TextureSpec, generate_dataset


def random_features(rng, n_views, n_patches, dim):
    """Per-view (f2d, f3d) float64 arrays with O(1) magnitude entries."""
    return [
        (
            rng.standard_normal((n_patches, dim)),
            rng.standard_normal((n_patches, dim)),
        )
        for _ in range(n_views)
    ]


def random_correspondences(rng, n_views, n_patches, n_neighbors=1, cyclic=True):
    """A synthetic CorrespondenceSet with 1..P random pairs per view pair."""
    pairs = {}
    rejections = {}
    for i0 in range(n_views):
        for j1 in neighbor_set(i0 + 1, n_views, n_neighbors, cyclic):
            j0 = j1 - 1
            n = int(rng.integers(1, n_patches + 1))
            pairs[(i0, j0)] = np.stack(
                [rng.integers(0, n_patches, n), rng.integers(0, n_patches, n)],
                axis=1,
            ).astype(np.int64)
            rejections[(i0, j0)] = {"out_of_bounds": 0, "occluded": 0, "no_depth": 0}
    return CorrespondenceSet(
        n_views=n_views,
        grid=PatchGrid(rows=2, cols=2, patch_px=8),
        n_neighbors=n_neighbors,
        cyclic=cyclic,
        depth_tol=0.02,
        pairs=pairs,
        rejections=rejections,
    )


def relative_matrix_error(got, want) -> float:
    num = float(np.linalg.norm(got - want))
    den = max(float(np.linalg.norm(want)), 1e-12)
    return num / den


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small rendered sphere dataset shared by IO-heavy tests."""
    root = tmp_path_factory.mktemp("tinydata")
    scene = SceneSpec(
        ring=RingSpec(count=6, radius=3.0, height=0.4),
        texture=TextureSpec(seed=11),
        resolution=48,
    )
    manifest = generate_dataset(
        scene, n_normal=1, n_anomalous=4, out_dir=root, seed=5, n_test_normal=2
    )
    return root, scene, manifest
