"""Calibrated synthetic multi-view data by analytic ray casting.

Scenes are single parametric solids (sphere, cylinder, box) centered at the
origin, observed by a ring of pinhole cameras.  Geometric defects are CSG
spheres (union = bump, subtraction = dent), so every depth value has a
closed form; texture defects perturb albedo only.  Rendering is pure
arithmetic on fixed seeds, hence bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import CameraModel, ViewObservation, ViewSet, save_viewset
from .errors import ConfigError, DataError

_LIGHT_DIR = np.array([0.45, 0.25, 0.86])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.25
_MISS = np.inf


@dataclass(frozen=True)
class ShapeSpec:
    """Parametric solid centered at the origin.

    sphere: ``radius``.  cylinder: ``radius`` and full ``height`` along z.
    box: full ``extents`` (x, y, z).
    """

    kind: str = "sphere"
    radius: float = 1.0
    height: float = 1.6
    extents: tuple = (1.2, 0.9, 0.7)

    def __post_init__(self):
        if self.kind not in ("sphere", "cylinder", "box"):
            raise ConfigError(f"unknown shape kind {self.kind!r}")

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.radius
        if self.kind == "cylinder":
            return math.hypot(self.radius, self.height / 2.0)
        return 0.5 * math.sqrt(sum(e * e for e in self.extents))


@dataclass(frozen=True)
class TextureSpec:
    kind: str = "noise"  # noise | flat
    seed: int = 0
    scale: float = 3.0

    def __post_init__(self):
        if self.kind not in ("noise", "flat"):
            raise ConfigError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class RingSpec:
    """Camera ring: ``count`` cameras evenly spaced around the look-at point."""

    count: int = 12
    radius: float = 3.0
    height: float = 0.6
    lookat: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    shape: ShapeSpec = field(default_factory=ShapeSpec)
    texture: TextureSpec = field(default_factory=TextureSpec)
    ring: RingSpec = field(default_factory=RingSpec)
    resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.ring.count < 3:
            raise ConfigError("camera ring needs at least 3 views")
        if self.ring.radius <= self.shape.bounding_radius:
            raise ConfigError("ring radius must exceed the shape bounding radius")
        if self.resolution < 16:
            raise ConfigError("resolution below 16 px is not useful")


@dataclass(frozen=True)
class DefectSpec:
    """Surface defect at (azimuth, band) on the shape.

    ``magnitude`` is an intensity delta for texture_blotch and a world-unit
    displacement for geometric kinds.  ``band`` in [-1, 1] selects the
    vertical position within the camera-facing surface band.
    """

    kind: str  # texture_blotch | geometric_dent | geometric_bump
    azimuth: float = 0.0
    band: float = 0.0
    radius: float = 0.25
    magnitude: float = 0.4
    seed: int = 0

    def __post_init__(self):
        kinds = ("texture_blotch", "geometric_dent", "geometric_bump")
        if self.kind not in kinds:
            raise ConfigError(f"unknown defect kind {self.kind!r}")
        if self.radius <= 0:
            raise ConfigError("defect radius must be positive")
        if self.magnitude == 0:
            raise ConfigError("defect magnitude must be nonzero")


# ---------------------------------------------------------------------------
# procedural texture

_NOISE_K1 = np.uint64(0x9E3779B97F4A7C15)
_NOISE_K2 = np.uint64(0xC2B2AE3D27D4EB4F)
_NOISE_K3 = np.uint64(0x165667B19E3779F9)


def _lattice_hash(ix, iy, iz, seed: int):
    """Deterministic value in [0, 1) per integer lattice point."""
    seed_mix = np.uint64((seed * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF)
    h = (
        ix.astype(np.int64).astype(np.uint64) * _NOISE_K1
        ^ iy.astype(np.int64).astype(np.uint64) * _NOISE_K2
        ^ iz.astype(np.int64).astype(np.uint64) * _NOISE_K3
        ^ seed_mix
    )
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Trilinearly interpolated lattice noise in [0, 1), shape (n,)."""
    q = np.asarray(points, dtype=np.float64) * scale
    base = np.floor(q)
    frac = q - base
    # smoothstep weights
    w = frac * frac * (3.0 - 2.0 * frac)
    acc = np.zeros(q.shape[0])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _lattice_hash(
                    base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz, seed
                )
                wx = w[:, 0] if dx else 1.0 - w[:, 0]
                wy = w[:, 1] if dy else 1.0 - w[:, 1]
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                acc += corner * wx * wy * wz
    return acc


# ---------------------------------------------------------------------------
# ray / solid intersections (all rays share one origin, unit directions)


def _interval_sphere(o, d, center, radius):
    oc = o - center
    b = d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - root
    t1 = -b + root
    t0 = np.where(hit, t0, _MISS)
    t1 = np.where(hit, t1, -_MISS)
    return t0, t1


def _interval_slab(o_axis, d_axis, lo, hi):
    d_safe = np.where(np.abs(d_axis) < 1e-12, np.copysign(1e-12, d_axis), d_axis)
    ta = (lo - o_axis) / d_safe
    tb = (hi - o_axis) / d_safe
    return np.minimum(ta, tb), np.maximum(ta, tb)


def _interval_box(o, d, extents):
    hx, hy, hz = (e / 2.0 for e in extents)
    t0x, t1x = _interval_slab(o[0], d[:, 0], -hx, hx)
    t0y, t1y = _interval_slab(o[1], d[:, 1], -hy, hy)
    t0z, t1z = _interval_slab(o[2], d[:, 2], -hz, hz)
    t0 = np.maximum(np.maximum(t0x, t0y), t0z)
    t1 = np.minimum(np.minimum(t1x, t1y), t1z)
    miss = t1 < t0
    return np.where(miss, _MISS, t0), np.where(miss, -_MISS, t1)


def _interval_cylinder(o, d, radius, height):
    half = height / 2.0
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[0] * d[:, 0] + o[1] * d[:, 1]
    c = o[0] ** 2 + o[1] ** 2 - radius * radius
    vertical = a < 1e-14
    a_safe = np.where(vertical, 1.0, a)
    disc = b * b - a_safe * c
    root = np.sqrt(np.maximum(disc, 0.0))
    side0 = (-b - root) / a_safe
    side1 = (-b + root) / a_safe
    # vertical rays: infinite side interval when inside the circle, miss outside
    side0 = np.where(vertical, np.where(c <= 0.0, -_MISS, _MISS), side0)
    side1 = np.where(vertical, np.where(c <= 0.0, _MISS, -_MISS), side1)
    side_miss = (~vertical) & (disc < 0.0)
    side0 = np.where(side_miss, _MISS, side0)
    side1 = np.where(side_miss, -_MISS, side1)
    cap0, cap1 = _interval_slab(o[2], d[:, 2], -half, half)
    t0 = np.maximum(side0, cap0)
    t1 = np.minimum(side1, cap1)
    miss = t1 < t0
    return np.where(miss, _MISS, t0), np.where(miss, -_MISS, t1)


def _base_interval(shape: ShapeSpec, o, d):
    if shape.kind == "sphere":
        return _interval_sphere(o, d, np.zeros(3), shape.radius)
    if shape.kind == "cylinder":
        return _interval_cylinder(o, d, shape.radius, shape.height)
    return _interval_box(o, d, shape.extents)


def _base_normal(shape: ShapeSpec, pts):
    if shape.kind == "sphere":
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)
    if shape.kind == "cylinder":
        half = shape.height / 2.0
        rad = np.hypot(pts[:, 0], pts[:, 1])
        side_res = np.abs(rad - shape.radius)
        cap_res = np.abs(np.abs(pts[:, 2]) - half)
        n = np.zeros_like(pts)
        use_cap = cap_res < side_res
        rad_safe = np.where(rad < 1e-12, 1.0, rad)
        n[:, 0] = np.where(use_cap, 0.0, pts[:, 0] / rad_safe)
        n[:, 1] = np.where(use_cap, 0.0, pts[:, 1] / rad_safe)
        n[:, 2] = np.where(use_cap, np.sign(pts[:, 2]), 0.0)
        return n
    hx, hy, hz = (e / 2.0 for e in shape.extents)
    rel = np.abs(pts) / np.array([hx, hy, hz])
    axis = np.argmax(rel, axis=1)
    n = np.zeros_like(pts)
    n[np.arange(len(pts)), axis] = np.sign(pts[np.arange(len(pts)), axis])
    return n


def surface_point(shape: ShapeSpec, azimuth: float, band: float):
    """Surface point and outward normal at (azimuth, band) on the side."""
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    if shape.kind == "sphere":
        elev = band * 0.72 * (math.pi / 2.0)
        direction = np.array(
            [math.cos(elev) * ca, math.cos(elev) * sa, math.sin(elev)]
        )
        return shape.radius * direction, direction
    if shape.kind == "cylinder":
        z = band * 0.8 * (shape.height / 2.0)
        point = np.array([shape.radius * ca, shape.radius * sa, z])
        normal = np.array([ca, sa, 0.0])
        return point, normal
    hx, hy, hz = (e / 2.0 for e in shape.extents)
    tx = hx / abs(ca) if abs(ca) > 1e-9 else math.inf
    ty = hy / abs(sa) if abs(sa) > 1e-9 else math.inf
    t = min(tx, ty)
    point = np.array([t * ca, t * sa, band * 0.8 * hz])
    if tx <= ty:
        normal = np.array([math.copysign(1.0, ca), 0.0, 0.0])
    else:
        normal = np.array([0.0, math.copysign(1.0, sa), 0.0])
    return point, normal


def _defect_sphere(shape: ShapeSpec, defect: DefectSpec):
    """Center and radius of the CSG sphere realizing a geometric defect."""
    point, normal = surface_point(shape, defect.azimuth, defect.band)
    mag = abs(defect.magnitude)
    r_d = (defect.radius**2 + mag**2) / (2.0 * mag)
    if defect.kind == "geometric_bump":
        center = point - normal * (r_d - mag)
    else:
        center = point + normal * (r_d - mag)
    return center, r_d


def cast_rays(shape: ShapeSpec, defect: Optional[DefectSpec], origin, dirs):
    """First-hit distances for unit-direction rays from a common origin.

    Returns (t, on_defect): ``t`` is inf for misses; ``on_defect`` marks
    rays whose first hit lies on the defect surface (always False for
    texture defects and no defect).
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    tA0, tA1 = _base_interval(shape, o, d)
    eps = 1e-9
    geometric = defect is not None and defect.kind.startswith("geometric")
    if not geometric:
        t = np.where(tA0 > eps, tA0, _MISS)
        return t, np.zeros(len(d), dtype=bool)
    center, r_d = _defect_sphere(shape, defect)
    tB0, tB1 = _interval_sphere(o, d, center, r_d)
    hitB = tB1 >= tB0
    if defect.kind == "geometric_bump":
        t_base = np.where(tA0 > eps, tA0, _MISS)
        t_bump = np.where(hitB & (tB0 > eps), tB0, _MISS)
        t_union = np.minimum(t_base, t_bump)
        on_defect = np.isfinite(t_union) & (t_bump < t_base)
        return t_union, on_defect
    # dent: first point of [tA0, tA1] outside the open interval (tB0, tB1)
    entry_clear = (tA0 <= tB0 + eps) | (tA0 >= tB1 - eps) | ~hitB
    t_entry = np.where(entry_clear & (tA0 > eps), tA0, _MISS)
    wall_ok = hitB & ~entry_clear & (tB1 <= tA1 + eps) & (tB1 > eps)
    t_wall = np.where(wall_ok, tB1, _MISS)
    t = np.where(np.isfinite(t_entry), t_entry, t_wall)
    on_defect = np.isfinite(t) & ~np.isfinite(t_entry) & wall_ok
    return t, on_defect


def _hit_normals(shape, defect, hits, on_defect):
    normals = np.zeros_like(hits)
    base = ~on_defect
    if np.any(base):
        normals[base] = _base_normal(shape, hits[base])
    if np.any(on_defect):
        center, r_d = _defect_sphere(shape, defect)
        rel = (hits[on_defect] - center) / r_d
        if defect.kind == "geometric_dent":
            rel = -rel  # cavity wall faces outward
        normals[on_defect] = rel
    return normals


# ---------------------------------------------------------------------------
# cameras and rendering


def ring_camera(scene: SceneSpec, view_index: int) -> CameraModel:
    """Exact pose of camera ``view_index`` (1-based) on the ring."""
    ring = scene.ring
    if not 1 <= view_index <= ring.count:
        raise ConfigError(f"view_index {view_index} outside 1..{ring.count}")
    az = ring_azimuth(scene, view_index)
    lookat = np.asarray(ring.lookat, dtype=np.float64)
    eye = lookat + np.array(
        [ring.radius * math.cos(az), ring.radius * math.sin(az), ring.height]
    )
    res = scene.resolution
    dist = float(np.linalg.norm(eye - lookat))
    half_angle = math.asin(min(0.999, scene.shape.bounding_radius / dist))
    focal = (res / 2.0) / math.tan(min(1.2, 1.3 * half_angle))
    return CameraModel.look_at(
        eye=eye, target=lookat, fx=focal, fy=focal, cx=res / 2.0, cy=res / 2.0
    )


def ring_azimuth(scene: SceneSpec, view_index: int) -> float:
    return 2.0 * math.pi * (view_index - 1) / scene.ring.count


def render_view(
    scene: SceneSpec, defect: Optional[DefectSpec], view_index: int
) -> ViewObservation:
    """Render one calibrated view: shaded image, exact depth, defect mask."""
    camera = ring_camera(scene, view_index)
    res = scene.resolution
    vv, uu = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    uv = np.stack([uu.reshape(-1) + 0.5, vv.reshape(-1) + 0.5], axis=1)
    origin, dirs = camera.pixel_ray(uv)
    t, on_defect = cast_rays(scene.shape, defect, origin, dirs)
    hit_mask = np.isfinite(t)

    depth = np.zeros(res * res)
    image = np.zeros(res * res)
    mask = np.zeros(res * res, dtype=np.float32)
    if np.any(hit_mask):
        th = t[hit_mask]
        hits = origin + dirs[hit_mask] * th[:, None]
        # camera-frame z of the hit, not the ray length
        depth[hit_mask] = th * (dirs[hit_mask] @ camera.rotation[2])
        normals = _hit_normals(scene.shape, defect, hits, on_defect[hit_mask])
        if scene.texture.kind == "noise":
            albedo = 0.35 + 0.5 * value_noise(
                hits, scene.texture.seed, scene.texture.scale
            )
        else:
            albedo = np.full(len(hits), 0.6)
        blotch = (
            defect is not None and defect.kind == "texture_blotch"
        )
        region = None
        if blotch:
            center, _ = surface_point(scene.shape, defect.azimuth, defect.band)
            region = np.linalg.norm(hits - center, axis=1) <= defect.radius
            albedo = np.where(region, albedo + defect.magnitude, albedo)
            albedo = np.clip(albedo, 0.02, 1.0)
        lambert = np.maximum(0.0, normals @ _LIGHT_DIR)
        image[hit_mask] = np.clip(albedo * (_AMBIENT + (1.0 - _AMBIENT) * lambert), 0.0, 1.0)
        if blotch:
            mask_local = region
        else:
            mask_local = on_defect[hit_mask]
        mask[hit_mask] = mask_local.astype(np.float32)

    return ViewObservation(
        view_index=view_index,
        image=image.reshape(res, res, 1).astype(np.float32),
        depth=depth.reshape(res, res).astype(np.float32),
        camera=camera,
        gt_mask=mask.reshape(res, res),
    )


def render_sample(
    scene: SceneSpec, defect: Optional[DefectSpec], sample_id: str, label: str,
    keep_masks: bool = True,
) -> ViewSet:
    views = []
    for k in range(1, scene.ring.count + 1):
        view = render_view(scene, defect, k)
        if not keep_masks:
            view = ViewObservation(
                view_index=view.view_index,
                image=view.image,
                depth=view.depth,
                camera=view.camera,
                gt_mask=None,
            )
        views.append(view)
    return ViewSet(sample_id=sample_id, views=tuple(views), label=label)


# ---------------------------------------------------------------------------
# dataset generation

_DEFECT_CYCLE = ("texture_blotch", "geometric_dent", "geometric_bump")


def _draw_defect(scene: SceneSpec, rng: np.random.Generator, kind: str) -> DefectSpec:
    # place the defect facing one of the cameras so it is observable
    cam = int(rng.integers(1, scene.ring.count + 1))
    az = ring_azimuth(scene, cam) + float(rng.uniform(-0.5, 0.5)) * (
        math.pi / scene.ring.count
    )
    band = float(rng.uniform(-0.5, 0.5))
    bound = scene.shape.bounding_radius
    radius = float(rng.uniform(0.18, 0.30)) * bound
    if kind == "texture_blotch":
        magnitude = float(rng.choice([-1.0, 1.0])) * float(rng.uniform(0.35, 0.55))
    else:
        magnitude = float(rng.uniform(0.10, 0.16)) * bound
    return DefectSpec(
        kind=kind,
        azimuth=az,
        band=band,
        radius=radius,
        magnitude=magnitude,
        seed=int(rng.integers(0, 2**31)),
    )


def _write_sample(viewset: ViewSet, directory: Path, category: str, extra=None):
    save_viewset(viewset, directory)
    meta = {
        "sample_id": viewset.sample_id,
        "label": viewset.label,
        "I": viewset.n_views,
        "category": category,
    }
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def generate_dataset(
    scene: SceneSpec,
    n_normal: int,
    n_anomalous: int,
    out_dir,
    seed: int = 0,
    n_test_normal: Optional[int] = None,
) -> dict:
    """Write ``train/`` and ``test/`` splits under ``out_dir``.

    Training holds ``n_normal`` normal samples; the test split mixes
    ``n_test_normal`` held-out normals (default: half the anomaly count,
    at least 2) with ``n_anomalous`` defect-injected samples cycling
    through the defect kinds.  Texture seeds are jittered per sample.
    Returns a manifest dict that is also written to dataset_meta.json.
    """
    if n_normal < 1:
        raise ConfigError("need at least one normal training sample")
    if n_test_normal is None:
        n_test_normal = max(2, n_anomalous // 2)
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    jitter = lambda: int(rng.integers(0, 2**31))

    def textured(scene_seed):
        return replace(scene, texture=replace(scene.texture, seed=scene_seed))

    manifest = {"seed": seed, "train": [], "test": []}
    for idx in range(n_normal):
        sid = f"train_normal_{idx:03d}"
        sample_scene = textured(scene.texture.seed + jitter())
        viewset = render_sample(sample_scene, None, sid, "normal", keep_masks=False)
        _write_sample(viewset, out_dir / "train" / sid, "normal")
        manifest["train"].append({"sample_id": sid, "label": "normal"})

    for idx in range(n_test_normal):
        sid = f"test_normal_{idx:03d}"
        sample_scene = textured(scene.texture.seed + jitter())
        viewset = render_sample(sample_scene, None, sid, "normal")
        _write_sample(viewset, out_dir / "test" / sid, "normal")
        manifest["test"].append({"sample_id": sid, "label": "normal"})

    for idx in range(n_anomalous):
        kind = _DEFECT_CYCLE[idx % len(_DEFECT_CYCLE)]
        sid = f"test_{kind}_{idx:03d}"
        sample_scene = textured(scene.texture.seed + jitter())
        viewset = None
        defect = None
        for _ in range(8):
            defect = _draw_defect(scene, rng, kind)
            viewset = render_sample(sample_scene, defect, sid, "anomalous")
            if any(np.any(v.gt_mask > 0) for v in viewset.views):
                break
        else:
            raise DataError(f"{sid}: defect never visible after 8 placements")
        _write_sample(
            viewset,
            out_dir / "test" / sid,
            kind,
            extra={"defect": {
                "kind": defect.kind,
                "azimuth": defect.azimuth,
                "band": defect.band,
                "radius": defect.radius,
                "magnitude": defect.magnitude,
            }},
        )
        manifest["test"].append({"sample_id": sid, "label": "anomalous",
                                 "category": kind})

    (out_dir / "dataset_meta.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    return manifest
