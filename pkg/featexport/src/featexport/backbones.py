"""Frozen patch-feature backbones.

The only built-in is ``patchlin``, a transformer-style patch embedding
with fixed seeded weights: non-overlapping patches, one linear map per
output stream, tanh squashing. It downloads nothing and is fully
deterministic, which is what the conformance fixtures and desk-scale
runs need. Real pretrained models plug in through the same registry;
an entry must expose ``name``, ``layers`` and ``embed``.
"""

from __future__ import annotations

import numpy as np

from .errors import ExportError, LayoutError


def patch_grid(height: int, width: int, patch_px: int) -> tuple:
    """(rows, cols) of the patch grid; the image must tile exactly."""
    if patch_px < 2:
        raise ExportError(f"patch size {patch_px} is too small")
    if height % patch_px or width % patch_px:
        raise LayoutError(
            f"resolution {height}x{width} is not divisible by patch size "
            f"{patch_px}"
        )
    return height // patch_px, width // patch_px


def patch_blocks(plane: np.ndarray, patch_px: int) -> np.ndarray:
    """(P, patch_px * patch_px * 3) row-major blocks of a (H, W, 3) plane."""
    rows, cols = patch_grid(plane.shape[0], plane.shape[1], patch_px)
    blocks = plane.reshape(rows, patch_px, cols, patch_px, 3)
    blocks = blocks.transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows * cols, patch_px * patch_px * 3)


class PatchLinear:
    name = "patchlin"
    layers = ("patch_embed",)

    def __init__(self, patch_px: int, seed: int):
        self.patch_px = patch_px
        self.seed = seed

    def embed(self, plane: np.ndarray, out_dim: int, stream: int) -> np.ndarray:
        """(P, out_dim) float32 features of a (H, W, 3) float plane."""
        blocks = patch_blocks(np.asarray(plane, dtype=np.float64), self.patch_px)
        raw_dim = blocks.shape[1]
        rng = np.random.default_rng([self.seed, stream, raw_dim, out_dim])
        weights = rng.standard_normal((raw_dim, out_dim)) / np.sqrt(raw_dim)
        return np.tanh(blocks @ weights).astype(np.float32)


BACKBONES = {PatchLinear.name: PatchLinear}


def get_backbone(name: str, patch_px: int, seed: int):
    if name not in BACKBONES:
        known = ", ".join(sorted(BACKBONES))
        raise ExportError(f"unknown backbone {name!r}; available: {known}")
    return BACKBONES[name](patch_px=patch_px, seed=seed)
