import filecmp
import math
import warnings

import numpy as np
import pytest

from mvanomaly.datamodel import load_viewset
from mvanomaly.errors import ConfigError
from mvanomaly.synth import (
    DefectSpec,
    RingSpec,
    SceneSpec,
    ShapeSpec,
    TextureSpec,
    cast_rays,
    generate_dataset,
    render_sample,
    render_view,
    ring_camera,
    surface_point,
    value_noise,
)
from oracles import oracle_sphere_hit


def axis_scene(shape="sphere", resolution=48, **shape_kw):
    """Six-camera ring at radius 3 in the z=0 plane (camera 1 on +x)."""
    return SceneSpec(
        shape=ShapeSpec(kind=shape, **shape_kw),
        ring=RingSpec(count=6, radius=3.0, height=0.0),
        resolution=resolution,
    )


# ---------------------------------------------------------------------------
# ray casting


def test_principal_ray_depth_sphere():
    scene = axis_scene()
    cam = ring_camera(scene, 1)
    origin, dirs = cam.pixel_ray(np.array([[cam.cx, cam.cy]]))
    t, _ = cast_rays(scene.shape, None, origin, dirs)
    depth = t[0] * float(dirs[0] @ cam.rotation[2])
    assert abs(depth - 2.0) < 1e-4


def test_principal_ray_depth_cylinder_and_box():
    for kind, expected in (("cylinder", 2.0), ("box", 2.4)):
        scene = axis_scene(kind)
        cam = ring_camera(scene, 1)
        origin, dirs = cam.pixel_ray(np.array([[cam.cx, cam.cy]]))
        t, _ = cast_rays(scene.shape, None, origin, dirs)
        depth = t[0] * float(dirs[0] @ cam.rotation[2])
        assert abs(depth - expected) < 1e-9, kind


def test_cast_matches_sphere_closed_form():
    scene = axis_scene()
    cam = ring_camera(scene, 2)
    rng = np.random.default_rng(4)
    uv = rng.uniform(5, 43, size=(64, 2))
    origin, dirs = cam.pixel_ray(uv)
    t, _ = cast_rays(scene.shape, None, origin, dirs)
    for i in range(len(uv)):
        ref = oracle_sphere_hit(origin, dirs[i], 1.0)
        if ref is None:
            assert not np.isfinite(t[i])
        else:
            assert abs(t[i] - ref) < 1e-9


def test_rendered_depth_lies_on_surface():
    scene = axis_scene()
    view = render_view(scene, None, 3)
    valid = view.depth > 0
    assert valid.sum() > 100
    vv, uu = np.nonzero(valid)
    uv = np.stack([uu + 0.5, vv + 0.5], axis=1)
    world = view.camera.unproject(uv, view.depth[valid].astype(np.float64))
    radii = np.linalg.norm(world, axis=1)
    np.testing.assert_allclose(radii, 1.0, atol=1e-5)


def test_depth_is_camera_z_not_ray_length():
    # off-center pixels have ray length > z, so equality would be a bug
    scene = axis_scene()
    cam = ring_camera(scene, 1)
    view = render_view(scene, None, 1)
    valid = view.depth > 0
    vv, uu = np.nonzero(valid)
    off = (np.abs(uu - cam.cx) > 8) & (np.abs(vv - cam.cy) > 8)
    assert off.sum() > 10
    uv = np.stack([uu[off] + 0.5, vv[off] + 0.5], axis=1)
    origin, dirs = cam.pixel_ray(uv)
    t, _ = cast_rays(scene.shape, None, origin, dirs)
    z = t * (dirs @ cam.rotation[2])
    np.testing.assert_allclose(view.depth[vv[off], uu[off]], z, atol=1e-5)
    assert np.all(t > z + 1e-6)


@pytest.mark.parametrize("shape", ["sphere", "cylinder", "box"])
@pytest.mark.parametrize(
    "kind", ["texture_blotch", "geometric_dent", "geometric_bump"]
)
def test_every_shape_defect_combo_renders_clean(shape, kind):
    scene = axis_scene(shape)
    defect = DefectSpec(kind=kind, azimuth=0.3, band=0.1, radius=0.25,
                        magnitude=0.4 if kind == "texture_blotch" else 0.12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for k in (1, 2):
            view = render_view(scene, defect, k)
    assert np.all(np.isfinite(view.depth))
    assert np.all(view.depth >= 0)
    assert np.all((view.image >= 0) & (view.image <= 1))


# ---------------------------------------------------------------------------
# defects


def front_pixel_of(scene, defect, view_index):
    """Pixel of the defect's surface point in the given view."""
    cam = ring_camera(scene, view_index)
    point, _ = surface_point(scene.shape, defect.azimuth, defect.band)
    uv, z = cam.project(point[None, :])
    assert z[0] > 0
    return int(uv[0, 0]), int(uv[0, 1])


def test_dent_pushes_depth_away():
    scene = axis_scene()
    mag = 0.12
    defect = DefectSpec(kind="geometric_dent", azimuth=0.0, band=0.0,
                        radius=0.25, magnitude=mag)
    clean = render_view(scene, None, 1)
    dented = render_view(scene, defect, 1)
    u, v = front_pixel_of(scene, defect, 1)
    shift = float(dented.depth[v, u] - clean.depth[v, u])
    assert shift >= 0.5 * mag
    assert dented.gt_mask[v, u] == 1.0


def test_bump_pulls_depth_closer():
    scene = axis_scene()
    mag = 0.12
    defect = DefectSpec(kind="geometric_bump", azimuth=0.0, band=0.0,
                        radius=0.25, magnitude=mag)
    clean = render_view(scene, None, 1)
    bumped = render_view(scene, defect, 1)
    u, v = front_pixel_of(scene, defect, 1)
    shift = float(clean.depth[v, u] - bumped.depth[v, u])
    assert shift >= 0.5 * mag
    assert bumped.gt_mask[v, u] == 1.0


def test_blotch_changes_image_not_depth():
    scene = axis_scene()
    defect = DefectSpec(kind="texture_blotch", azimuth=0.0, band=0.0,
                        radius=0.25, magnitude=0.5)
    clean = render_view(scene, None, 1)
    blotched = render_view(scene, defect, 1)
    np.testing.assert_array_equal(clean.depth, blotched.depth)
    assert np.any(blotched.gt_mask > 0)
    changed = blotched.image[:, :, 0] != clean.image[:, :, 0]
    assert np.any(changed & (blotched.gt_mask > 0))
    # outside the blotch nothing moves
    assert not np.any(changed & (blotched.gt_mask == 0))


def test_no_defect_means_empty_masks():
    scene = axis_scene()
    vs = render_sample(scene, None, "s", "normal")
    for view in vs.views:
        assert view.gt_mask is not None
        assert not np.any(view.gt_mask > 0)


def test_mask_invisible_from_opposite_side():
    scene = axis_scene()
    defect = DefectSpec(kind="geometric_bump", azimuth=0.0, band=0.0,
                        radius=0.22, magnitude=0.12)
    front = render_view(scene, defect, 1)   # camera at azimuth 0
    back = render_view(scene, defect, 4)    # camera at azimuth pi
    assert np.any(front.gt_mask > 0)
    assert not np.any(back.gt_mask > 0)


def test_defect_spec_validation():
    with pytest.raises(ConfigError):
        DefectSpec(kind="scratch")
    with pytest.raises(ConfigError):
        DefectSpec(kind="geometric_dent", radius=0.0)
    with pytest.raises(ConfigError):
        DefectSpec(kind="geometric_dent", magnitude=0.0)


def test_scene_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(ring=RingSpec(count=2))
    with pytest.raises(ConfigError):
        SceneSpec(ring=RingSpec(radius=0.5))  # inside the unit sphere
    with pytest.raises(ConfigError):
        SceneSpec(resolution=8)


# ---------------------------------------------------------------------------
# texture


def test_value_noise_deterministic_and_bounded():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((500, 3))
    a = value_noise(pts, seed=3, scale=3.0)
    b = value_noise(pts, seed=3, scale=3.0)
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0.0) & (a <= 1.0))
    assert value_noise(pts, seed=4, scale=3.0).std() > 0


def test_render_deterministic():
    scene = axis_scene()
    a = render_view(scene, None, 2)
    b = render_view(scene, None, 2)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()


# ---------------------------------------------------------------------------
# dataset generation


def test_dataset_layout_and_counts(tiny_dataset):
    root, scene, manifest = tiny_dataset
    assert len(manifest["train"]) == 1
    test_labels = [s["label"] for s in manifest["test"]]
    assert test_labels.count("anomalous") == 4
    assert test_labels.count("normal") == 2
    assert (root / "dataset_meta.json").is_file()
    train_dirs = sorted(p.name for p in (root / "train").iterdir())
    assert train_dirs == ["train_normal_000"]
    sample = load_viewset(root / "train" / "train_normal_000")
    assert sample.n_views == scene.ring.count
    assert sample.label == "normal"


def test_train_samples_carry_no_masks(tiny_dataset):
    root, _, _ = tiny_dataset
    vs = load_viewset(root / "train" / "train_normal_000")
    assert all(v.gt_mask is None for v in vs.views)


def test_anomalous_samples_visible(tiny_dataset):
    root, _, manifest = tiny_dataset
    for entry in manifest["test"]:
        vs = load_viewset(root / "test" / entry["sample_id"])
        if entry["label"] == "anomalous":
            assert any(np.any(v.gt_mask > 0) for v in vs.views), entry["sample_id"]
        else:
            assert all(not np.any(v.gt_mask > 0) for v in vs.views)


def test_generate_deterministic(tmp_path):
    scene = SceneSpec(ring=RingSpec(count=4, radius=3.0), resolution=32,
                      texture=TextureSpec(seed=2))
    for sub in ("a", "b"):
        generate_dataset(scene, n_normal=1, n_anomalous=2,
                         out_dir=tmp_path / sub, seed=9, n_test_normal=1)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def assert_equal_trees(d):
        assert not d.left_only and not d.right_only and not d.diff_files, (
            d.left_only, d.right_only, d.diff_files
        )
        for sub in d.subdirs.values():
            assert_equal_trees(sub)

    assert_equal_trees(cmp)


def test_defect_kinds_cycle(tiny_dataset):
    _, _, manifest = tiny_dataset
    kinds = [e["category"] for e in manifest["test"] if e["label"] == "anomalous"]
    assert kinds == ["texture_blotch", "geometric_dent", "geometric_bump",
                     "texture_blotch"]


def test_surface_point_on_surface():
    sphere = ShapeSpec(kind="sphere")
    p, n = surface_point(sphere, 0.7, 0.3)
    assert abs(np.linalg.norm(p) - 1.0) < 1e-12
    np.testing.assert_allclose(n, p / np.linalg.norm(p), atol=1e-12)
    cyl = ShapeSpec(kind="cylinder", radius=1.0, height=1.6)
    p, n = surface_point(cyl, 1.2, -0.5)
    assert abs(math.hypot(p[0], p[1]) - 1.0) < 1e-12
    assert abs(p[2]) <= 0.8 * 0.8 + 1e-12
    assert abs(n[2]) == 0.0
