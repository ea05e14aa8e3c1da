import numpy as np
import pytest

from hairsplat.config import preset
from hairsplat.core import look_at
from hairsplat.orientation import oracle_orientation_map
from hairsplat.planes import FormatError, read_planes, write_planes
from hairsplat.report import bidirectional_distance, mask_iou, point_to_polylines, report_metrics
from hairsplat.scene import (
    SceneError,
    StyleConfig,
    generate_synthetic_scene,
    load_scene,
    save_scene,
)


def _same_bundle(a, b):
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.hair_masks, b.hair_masks) and np.array_equal(a.body_masks, b.body_masks)
    assert np.array_equal(a.gt_strands, b.gt_strands)
    for ca, cb in zip(a.cameras, b.cameras):
        assert np.array_equal(ca.R, cb.R) and np.array_equal(ca.t, cb.t)


def test_generation_is_deterministic(tiny_bundle):
    again = generate_synthetic_scene(preset("tiny").synth, seed=5)
    _same_bundle(tiny_bundle, again)
    other = generate_synthetic_scene(preset("tiny").synth, seed=6)
    assert not np.array_equal(other.gt_strands, tiny_bundle.gt_strands)


def test_bundle_shapes(tiny_bundle):
    cfg = preset("tiny").synth
    b = tiny_bundle
    assert b.n_views == cfg.n_views == len(b.images) == len(b.oracle_maps)
    assert b.images.shape == (cfg.n_views, cfg.height, cfg.width, 3)
    assert sorted(np.concatenate([b.train, b.test]).tolist()) == list(range(cfg.n_views))
    assert b.gt_strands.shape == (cfg.n_strands, cfg.n_points, 3)
    # hair pixels are body pixels
    assert np.all(b.hair_masks <= b.body_masks + 1e-9)
    # roots on the scalp, up to the float32 rounding of stored strands
    assert np.all(b.scalp.distance(b.gt_strands[:, 0]) < 1e-8)


def test_perturbation_only_on_train_views(tiny_bundle):
    b = tiny_bundle
    for i in b.test:
        assert np.array_equal(b.cameras[i].R, b.gt_cameras[i].R)
    moved = [not np.allclose(b.cameras[i].R, b.gt_cameras[i].R) for i in b.train]
    assert all(moved)


def test_round_trip(tiny_bundle, tmp_path):
    save_scene(tiny_bundle, tmp_path / "s")
    back = load_scene(tmp_path / "s")
    _same_bundle(tiny_bundle, back)
    for a, b in zip(tiny_bundle.oracle_maps, back.oracle_maps):
        assert np.array_equal(a.angle, b.angle) and np.array_equal(a.valid, b.valid)
    # the point cloud is float32 data written with 9 significant digits
    assert np.array_equal(back.init_points.astype(np.float32), tiny_bundle.init_points.astype(np.float32))


def test_load_rejects_mismatched_view(tiny_bundle, tmp_path):
    from PIL import Image

    save_scene(tiny_bundle, tmp_path / "s")
    Image.new("L", (10, 10)).save(tmp_path / "s" / "masks" / "hair_003.png")
    with pytest.raises(SceneError, match="view 3"):
        load_scene(tmp_path / "s")
    (tmp_path / "s" / "images" / "view_001.png").unlink()
    with pytest.raises(SceneError, match="view 1"):
        load_scene(tmp_path / "s")
    with pytest.raises(SceneError):
        load_scene(tmp_path / "nothing")


def test_straight_style_looks_vertical():
    cfg = preset("tiny").synth
    cfg.style = StyleConfig.preset("straight")
    cfg.n_strands = 120
    b = generate_synthetic_scene(cfg, seed=2)
    # frontal view from the ring at the head's height
    R, t = look_at([0, -0.1, 0.55], [0, -0.1, 0])
    cam = b.gt_cameras[0].__class__(150, 150, 63.5, 63.5, 128, 128, R=R, t=t)
    m = oracle_orientation_map(b.gt_strands, cam)
    ang = np.degrees(m.angle[m.valid])
    vertical = np.abs(ang - 90) < 30
    assert vertical.mean() > 0.6


def test_planes_version_checked(tmp_path):
    write_planes(tmp_path, "p", {"a": np.zeros((2, 3))}, kind="x")
    read_planes(tmp_path, "p", kind="x")
    with pytest.raises(FormatError):
        read_planes(tmp_path, "p", kind="y")
    doc = (tmp_path / "p.json").read_text().replace('"version": 1', '"version": 9')
    (tmp_path / "p.json").write_text(doc)
    with pytest.raises(FormatError, match="version"):
        read_planes(tmp_path, "p")


# ---------------------------------------------------------------------------
# report


def _brute_point_polyline(p, strands):
    best = np.inf
    for s in strands:
        for a, b in zip(s[:-1], s[1:]):
            ab = b - a
            t = np.clip((p - a) @ ab / (ab @ ab), 0, 1)
            best = min(best, np.linalg.norm(p - a - t * ab))
    return best


def test_point_to_polylines_brute_force(rng):
    strands = np.cumsum(rng.normal(0, 0.05, (15, 6, 3)), axis=1)
    pts = rng.normal(0, 0.2, (40, 3))
    d = point_to_polylines(pts, strands)
    assert np.allclose(d, [_brute_point_polyline(p, strands) for p in pts], atol=1e-14)


def test_bidirectional_distance(rng):
    s = np.cumsum(rng.normal(0, 0.05, (5, 6, 3)), axis=1)
    assert bidirectional_distance(s, s)["mean"] == 0
    d = bidirectional_distance(s + [0.01, 0, 0], s)
    assert 0 < d["mean"] <= 0.01 + 1e-12


def test_mask_iou():
    a = np.zeros((4, 4))
    a[:2] = 1
    b = np.zeros((4, 4))
    b[1:3] = 1
    assert np.isclose(mask_iou(a, b), 1 / 3)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_report_self_comparison_and_empty(tiny_bundle):
    rep = report_metrics(tiny_bundle.gt_strands, tiny_bundle)
    assert rep["orientation_error_deg"] < 1.0 and rep["iou"] > 0.99
    assert rep["strand_distance"]["mean"] == 0
    empty = report_metrics(np.zeros((0, 4, 3)), tiny_bundle)
    assert empty["iou"] == 0.0 and empty["orientation_overlap_empty"]
    assert empty["orientation_error_deg"] is None
