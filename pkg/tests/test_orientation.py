import math

import numpy as np
import pytest

from hairsplat.core import Camera, InvalidInput, look_at
from hairsplat.orientation import (
    OrientationMap,
    gabor_orientation_map,
    oracle_orientation_map,
    orientation_error,
    pooled_error,
    rasterize_lines,
    segment_arrays,
)


def stripes(angle, size=64, wavelength=4.0):
    """Sinusoidal stripes whose lines run at ``angle`` (pixel coordinates, y down)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    across = -xx * math.sin(angle) + yy * math.cos(angle)
    return 0.5 + 0.5 * np.sin(2 * np.pi * across / wavelength)


@pytest.mark.parametrize("deg", [0.0, 22.5, 45.0, 80.0, 100.0, 157.0])
def test_gabor_recovers_stripe_direction(deg):
    m = gabor_orientation_map(stripes(math.radians(deg)))
    inner = (slice(12, -12), slice(12, -12))
    # odd-phase kernels go silent where the stripe phase crosses zero, so
    # only part of the interior is valid
    valid = m.valid[inner]
    assert valid.mean() > 0.4
    err = np.degrees(np.abs((m.angle[inner] - math.radians(deg) + np.pi / 2) % np.pi - np.pi / 2))
    assert err[valid].max() < 2.0


@pytest.mark.parametrize("deg", [10.0, 30.0, 65.0])
def test_gabor_rotation_equivariance(deg):
    img = stripes(math.radians(deg))
    a = gabor_orientation_map(img)
    b = gabor_orientation_map(np.rot90(img))
    # np.rot90 turns the picture counter-clockwise on screen: angle -> angle - 90 deg (y down)
    back = OrientationMap(np.rot90(b.angle, -1) + np.pi / 2, np.rot90(b.confidence, -1), np.rot90(b.valid, -1))
    e = orientation_error(a, back)
    assert e.count > 500 and e.mean_deg < 3.0


def test_gabor_is_pi_periodic():
    a = gabor_orientation_map(stripes(math.radians(40)))
    b = gabor_orientation_map(stripes(math.radians(40) + np.pi))
    # the shifted stripes are the inverted image; |odd response| is unchanged
    # up to rounding, which can flip near-ties at the reflected border
    inner = np.zeros(a.shape, bool)
    inner[12:-12, 12:-12] = True
    assert np.array_equal(a.valid & inner, b.valid & inner)
    assert orientation_error(a, b, inner).mean_deg < 1e-6


def test_gabor_constant_image_is_invalid():
    m = gabor_orientation_map(np.full((32, 32, 3), 0.4))
    assert not m.valid.any() and not m.confidence.any()
    with pytest.raises(InvalidInput):
        gabor_orientation_map(np.zeros((5, 5)))


def raster_reference(p0, p1, w, h):
    """Single-pixel-wide DDA written out plainly: sample the major axis at
    integer centers, round the minor coordinate half up."""
    (x0, y0), (x1, y1) = p0, p1
    swap = abs(x1 - x0) < abs(y1 - y0)
    if swap:
        x0, y0, x1, y1 = y0, x0, y1, x1
    if x1 < x0:
        x0, y0, x1, y1 = x1, y1, x0, y0
    cells = set()
    for i in range(math.ceil(x0), math.floor(x1) + 1):
        j = math.floor(y0 + (i - x0) / (x1 - x0) * (y1 - y0) + 0.5)
        px, py = (j, i) if swap else (i, j)
        if 0 <= px < w and 0 <= py < h:
            cells.add((py, px))
    return cells


def test_line_raster_matches_reference(rng):
    for _ in range(30):
        p0, p1 = rng.uniform(-3, 23, 2), rng.uniform(-3, 23, 2)
        _, _, ids = rasterize_lines(p0[None], p1[None], np.ones(1), np.ones(1), np.zeros(1), 20, 20)
        got = set(zip(*np.nonzero(ids >= 0)))
        assert got == raster_reference(p0, p1, 20, 20)


def test_line_raster_depth_test():
    p0 = np.array([[0.0, 5.0], [5.0, 0.0]])
    p1 = np.array([[10.0, 5.0], [5.0, 10.0]])
    # the vertical segment is nearer, drawn second, so it wins the crossing
    out, z, ids = rasterize_lines(p0, p1, np.array([2.0, 1.0]), np.array([2.0, 1.0]), np.array([0.0, 1.0]), 11, 11)
    assert ids[5, 5] == 1 and ids[5, 2] == 0 and z[5, 5] == 1.0
    # and still wins when drawn first
    _, _, ids = rasterize_lines(p0[::-1], p1[::-1], np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.zeros(2), 11, 11)
    assert ids[5, 5] == 0


def test_oracle_map_of_a_straight_strand():
    R, t = look_at([0, 0, -2], [0, 0, 0])
    cam = Camera(50, 50, 15.5, 15.5, 32, 32, R=R, t=t)
    a = math.radians(30)
    line = np.outer(np.linspace(-0.4, 0.4, 9), [math.cos(a), math.sin(a), 0])
    m = oracle_orientation_map(line[None], cam)
    assert m.valid.sum() > 15
    # world angle a looks like screen angle a for this camera (both image axes flip)
    assert np.allclose(m.angle[m.valid], a)
    _, _, _, _, ang = segment_arrays(line, cam)
    assert np.allclose(ang, a)


def test_orientation_error_metric():
    a = OrientationMap(np.full((2, 2), 0.05), np.ones((2, 2)), np.array([[1, 1], [0, 1]], bool))
    b = OrientationMap(np.full((2, 2), np.pi - 0.05), np.ones((2, 2)), np.array([[1, 0], [1, 1]], bool))
    e = orientation_error(a, b)
    assert e.count == 2 and np.isclose(e.mean_deg, math.degrees(0.1))
    assert orientation_error(a, b, np.zeros((2, 2), bool)).empty
    p = pooled_error([(a, b), (a, a)])
    assert p.count == 5 and np.isclose(p.mean_deg, 2 * math.degrees(0.1) / 5)
    assert pooled_error([]).mean_deg is None
    assert np.isclose(orientation_error(b, a).mean_deg, e.mean_deg)


def test_orientation_error_maximal():
    gt = OrientationMap(np.zeros((3, 3)), np.ones((3, 3)), np.ones((3, 3), bool))
    pred = OrientationMap(np.full((3, 3), np.pi / 2), np.ones((3, 3)), np.ones((3, 3), bool))
    assert np.isclose(orientation_error(pred, gt).mean_deg, 90.0)
    assert orientation_error(gt, gt).mean_deg == 0.0


def test_oracle_map_resolution_consistent(rng):
    R, t = look_at([0.3, 0.2, -2], [0, 0, 0])
    big = Camera(120, 120, 63.5, 63.5, 128, 128, R=R, t=t)
    small = Camera(60, 60, 31.75, 31.75, 64, 64, R=R, t=t)
    s = np.cumsum(rng.normal(0, 0.05, (20, 12, 3)), axis=1)
    a = oracle_orientation_map(s, big)
    b = oracle_orientation_map(s, small)
    # small pixel p covers big pixels 2p and 2p + 1 on each axis
    d = []
    for y, x in zip(*np.nonzero(b.valid)):
        blk = a.valid[2 * y:2 * y + 2, 2 * x:2 * x + 2]
        if blk.any():
            ang = a.angle[2 * y:2 * y + 2, 2 * x:2 * x + 2][blk][0]
            d.append(abs((ang - b.angle[y, x] + np.pi / 2) % np.pi - np.pi / 2))
    assert len(d) > 50 and np.degrees(np.median(d)) < 1.0


def test_orientation_map_round_trip(tmp_path, rng):
    m = OrientationMap(rng.uniform(0, np.pi, (5, 6)), rng.uniform(size=(5, 6)), rng.uniform(size=(5, 6)) > 0.5)
    m.save(tmp_path, "o")
    back = OrientationMap.load(tmp_path, "o")
    assert np.array_equal(back.angle, m.angle.astype(np.float32)) and np.array_equal(back.valid, m.valid)
    assert (tmp_path / "o_orient.png").exists()
