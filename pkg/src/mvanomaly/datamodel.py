"""Core domain types and the on-disk dataset layout.

A dataset directory holds one subdirectory per sample:

    <sample_id>/meta.json                 sample_id, label, I (+ category)
    <sample_id>/view_<k>/image.ft32       H x W x C intensity in [0, 1]
    <sample_id>/view_<k>/depth.ft32       H x W metric depth, 0 = no return
    <sample_id>/view_<k>/camera.json      fx, fy, cx, cy, rotation, translation
    <sample_id>/view_<k>/mask.ft32        optional H x W binary ground truth

View directories are named ``view_01`` .. ``view_<I>`` (two-digit zero
padding).  Pixel (u, v) means column u, row v; continuous image coordinates
put the center of pixel (u, v) at (u + 0.5, v + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    CameraError,
    DataError,
    DimensionMismatchError,
    MissingViewError,
)
from .tensorio import read_tensor, write_tensor

OUT_OF_GRID = -1

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a world-to-camera rigid transform.

    ``rotation`` (3x3) and ``translation`` (3,) map world points into the
    camera frame via X_cam = R @ X_world + t.  The camera looks along +z,
    x points right, y points down, so v grows downward in the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL):
            raise CameraError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise CameraError("rotation determinant must be +1")

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, up=(0.0, 0.0, 1.0)):
        """Build a camera at ``eye`` looking toward ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise CameraError("look-at target coincides with the eye")
        forward = forward / norm
        right = np.cross(forward, up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-9:
            # forward parallel to up: pick an arbitrary perpendicular axis
            alt = np.array([1.0, 0.0, 0.0])
            right = np.cross(forward, alt)
            rnorm = np.linalg.norm(right)
        right = right / rnorm
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        t = -R @ eye
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, rotation=R, translation=t)

    @property
    def eye(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def project(self, points):
        """Project world points to continuous pixel coords and depth.

        Returns (uv, z) with uv of shape (n, 2) and z the camera-frame
        depth.  Points behind the camera get z <= 0; callers must filter.
        """
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = self.fx * cam[:, 0] / safe + self.cx
        v = self.fy * cam[:, 1] / safe + self.cy
        return np.stack([u, v], axis=1), z

    def unproject(self, uv, depth) -> np.ndarray:
        """Lift continuous pixel coords with camera-frame depth to world."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        depth = np.asarray(depth, dtype=np.float64).reshape(-1)
        x = (uv[:, 0] - self.cx) / self.fx * depth
        y = (uv[:, 1] - self.cy) / self.fy * depth
        cam = np.stack([x, y, depth], axis=1)
        return (cam - self.translation) @ self.rotation

    def pixel_ray(self, uv):
        """World-space origin and unit directions of rays through ``uv``."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        x = (uv[:, 0] - self.cx) / self.fx
        y = (uv[:, 1] - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        d_world = d_cam @ self.rotation
        return self.eye, d_world

    def to_json_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["translation"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CameraError(f"malformed camera json: {exc}") from exc


@dataclass(frozen=True)
class ViewObservation:
    """One calibrated observation: image, depth map, camera, optional mask."""

    view_index: int
    image: np.ndarray  # H x W x C, intensity in [0, 1]
    depth: np.ndarray  # H x W, 0 marks no return
    camera: CameraModel
    gt_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim == 2:
            img = img[:, :, None]
        dep = np.asarray(self.depth, dtype=np.float32)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "depth", dep)
        if img.shape[:2] != dep.shape:
            raise DimensionMismatchError(
                f"view {self.view_index}: image {img.shape[:2]} vs depth {dep.shape}"
            )
        if np.any(dep < 0):
            raise DataError(f"view {self.view_index}: negative depth values")
        if self.gt_mask is not None:
            mask = np.asarray(self.gt_mask, dtype=np.float32)
            if mask.shape != dep.shape:
                raise DimensionMismatchError(
                    f"view {self.view_index}: mask {mask.shape} vs depth {dep.shape}"
                )
            if not np.all(np.isin(mask, (0.0, 1.0))):
                raise DataError(f"view {self.view_index}: mask must be binary")
            object.__setattr__(self, "gt_mask", mask)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def channels(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class ViewSet:
    """All observations of one physical sample, ordered by capture index."""

    sample_id: str
    views: tuple
    label: str = "unknown"  # normal | anomalous | unknown

    def __post_init__(self):
        views = tuple(sorted(self.views, key=lambda v: v.view_index))
        object.__setattr__(self, "views", views)
        if self.label not in ("normal", "anomalous", "unknown"):
            raise DataError(f"unknown label {self.label!r}")
        for pos, view in enumerate(views, start=1):
            if view.view_index != pos:
                raise MissingViewError(
                    f"{self.sample_id}: expected view {pos}, found {view.view_index}"
                )
        if views:
            h, w, c = views[0].height, views[0].width, views[0].channels
            for view in views[1:]:
                if (view.height, view.width, view.channels) != (h, w, c):
                    raise DimensionMismatchError(
                        f"{self.sample_id}: views disagree on H, W, or channels"
                    )

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass(frozen=True)
class PatchGrid:
    """Square-patch tiling of an H x W image.

    Remainder pixel strips (image extent not divisible by patch_px) are
    excluded from the grid.
    """

    rows: int
    cols: int
    patch_px: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.patch_px < 1:
            raise DataError("grid extents and patch size must be positive")

    @classmethod
    def for_image(cls, height: int, width: int, patch_px: int) -> "PatchGrid":
        return cls(rows=height // patch_px, cols=width // patch_px, patch_px=patch_px)

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def patch_center_pixel(self, p: int):
        """Integer (u, v) of the center pixel of patch ``p``."""
        row, col = divmod(p, self.cols)
        half = self.patch_px // 2
        return col * self.patch_px + half, row * self.patch_px + half


def patch_of_pixel(grid: PatchGrid, u: float, v: float) -> int:
    """Patch index containing pixel (u, v), or OUT_OF_GRID.

    Coordinates are continuous; u is the column, v the row.  Pixels in the
    remainder strip beyond the last full patch are out of grid.
    """
    if u < 0 or v < 0:
        return OUT_OF_GRID
    col = int(u // grid.patch_px)
    row = int(v // grid.patch_px)
    if col >= grid.cols or row >= grid.rows:
        return OUT_OF_GRID
    return row * grid.cols + col


@dataclass(frozen=True)
class FeatureMap:
    """Patch features of one (view, modality) pair."""

    view_index: int
    modality: str  # "2d" | "3d"
    grid: PatchGrid
    features: np.ndarray  # P x d
    refined: bool = False

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] != self.grid.n_patches:
            raise DimensionMismatchError(
                f"feature rows {feats.shape} do not match grid P={self.grid.n_patches}"
            )
        if not np.all(np.isfinite(feats)):
            raise DataError("feature map contains non-finite values")
        if self.modality not in ("2d", "3d"):
            raise DataError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "features", feats)


def view_dir_name(k: int) -> str:
    return f"view_{k:02d}"


def save_viewset(viewset: ViewSet, directory) -> None:
    """Write a ViewSet to ``directory`` in the dataset layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "sample_id": viewset.sample_id,
        "label": viewset.label,
        "I": viewset.n_views,
    }
    for view in viewset.views:
        vdir = directory / view_dir_name(view.view_index)
        vdir.mkdir(exist_ok=True)
        write_tensor(vdir / "image.ft32", view.image)
        write_tensor(vdir / "depth.ft32", view.depth)
        (vdir / "camera.json").write_text(
            json.dumps(view.camera.to_json_dict(), indent=2, sort_keys=True)
        )
        if view.gt_mask is not None:
            write_tensor(vdir / "mask.ft32", view.gt_mask)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_viewset(directory) -> ViewSet:
    """Load one sample directory into a ViewSet.

    Enforces the ViewSet invariants; missing views, malformed camera files,
    and dimension mismatches raise their distinct errors.
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    n_views = int(meta.get("I", 0))
    if n_views < 1:
        raise DataError(f"{directory}: meta.json declares no views")
    views = []
    for k in range(1, n_views + 1):
        vdir = directory / view_dir_name(k)
        if not vdir.is_dir():
            raise MissingViewError(f"{directory}: missing {view_dir_name(k)}")
        cam_path = vdir / "camera.json"
        try:
            cam_dict = json.loads(cam_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CameraError(f"{cam_path}: {exc}") from exc
        camera = CameraModel.from_json_dict(cam_dict)
        image = read_tensor(vdir / "image.ft32")
        depth = read_tensor(vdir / "depth.ft32")
        mask_path = vdir / "mask.ft32"
        mask = read_tensor(mask_path) if mask_path.is_file() else None
        views.append(
            ViewObservation(
                view_index=k, image=image, depth=depth, camera=camera, gt_mask=mask
            )
        )
    return ViewSet(
        sample_id=str(meta.get("sample_id", directory.name)),
        views=tuple(views),
        label=str(meta.get("label", "unknown")),
    )


def load_sample_meta(directory) -> dict:
    """Read just meta.json of a sample directory."""
    return json.loads((Path(directory) / "meta.json").read_text())


def list_sample_dirs(dataset_dir) -> list:
    """Sorted sample directories directly under ``dataset_dir``."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
