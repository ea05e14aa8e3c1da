import math

import numpy as np
import pytest

from helpers import random_scene, render_gradient_errors, small_camera
from hairsplat.core import Camera, look_at
from hairsplat.gaussians import GaussianScene, logit
from hairsplat.raster import ALPHA_MAX, ALPHA_MIN, T_MIN
from hairsplat.render import (
    AXIS_NONE,
    AXIS_PRINCIPAL,
    AXIS_SCREEN,
    NonFiniteParameter,
    Primitives,
    RenderGrads,
    RenderSettings,
    StaleRender,
    project,
    render_backward,
    render_forward,
)


def brute_force_composite(proj, opacity, bg, w, h):
    """Per-pixel front-to-back blending over every visible primitive."""
    order = [int(i) for i in np.argsort(np.where(proj.visible, proj.depths, np.inf), kind="stable") if proj.visible[i]]
    out = np.zeros((h, w, proj.feats.shape[1]))
    for py in range(h):
        for px in range(w):
            T = 1.0
            acc = np.zeros(proj.feats.shape[1])
            for g in order:
                dx, dy = px - proj.means2d[g, 0], py - proj.means2d[g, 1]
                a, b, c = proj.conics[g]
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0:
                    continue
                alpha = min(ALPHA_MAX, opacity[g] * math.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                if T * (1 - alpha) < T_MIN:
                    break
                acc += alpha * T * proj.feats[g]
                T *= 1 - alpha
            out[py, px] = acc + T * bg
    return out


def test_forward_matches_brute_force(rng):
    scene = random_scene(rng, 12)
    scene.opacity_logit[:] = logit(rng.uniform(0.05, 0.3, 12))
    cam = small_camera(rng, 24)
    settings = RenderSettings(background=np.array([0.2, 0.1, 0.4]), tile=8)
    prims = scene.to_primitives()
    out, ctx = render_forward(prims, cam, settings)
    ref = brute_force_composite(ctx.proj, prims.opacity, ctx.bg, 24, 24)
    img = np.concatenate([out.color, out.label[..., None], out.conf[..., None], out.silhouette[..., None],
                          out.orient_vec], axis=-1)
    assert np.allclose(img, ref, atol=1e-12)


def test_empty_scene_is_background():
    cam = Camera(10, 10, 4.5, 4.5, 10, 10, t=np.array([0, 0, 2.0]))
    out, ctx = render_forward(Primitives.empty(1), cam, RenderSettings(background=np.array([0.3, 0.2, 0.1])))
    assert np.allclose(out.color, [0.3, 0.2, 0.1])
    assert not out.silhouette.any() and not out.orient_valid.any()
    g = render_backward(ctx, RenderGrads(color=np.ones((10, 10, 3))))
    assert g.means.shape == (0, 3)


def _single(scales, quat, opacity=0.5, mean=(0.0, 0.0, 0.0)):
    return GaussianScene(
        means=np.array([mean], float), log_scales=np.log(np.array([scales], float)), quats=np.array([quat], float),
        opacity_logit=np.array([logit(opacity)]), sh=np.zeros((1, 4, 3)), label_logit=np.array([0.0]),
        log_conf=np.array([0.0]),
    )


def _front_camera(size=33):
    R, t = look_at([0, 0, -2], [0, 0, 0])
    c = (size - 1) / 2
    return Camera(40, 40, c, c, size, size, R=R, t=t)


def test_center_pixel_closed_form():
    cam = _front_camera()
    g = _single([0.1, 0.1, 0.1], [1, 0, 0, 0], opacity=0.6)
    out, _ = render_forward(g.to_primitives(), cam, RenderSettings(background=np.array([0.2, 0.2, 0.2])))
    # alpha at the mean is exactly the opacity; SH zero gives gray 0.5
    assert np.isclose(out.silhouette[16, 16], 0.6)
    assert np.allclose(out.color[16, 16], 0.6 * 0.5 + 0.4 * 0.2)
    assert np.isclose(out.label[16, 16], 0.6 * 0.5)


def test_alpha_is_clamped():
    out, _ = render_forward(_single([0.1, 0.1, 0.1], [1, 0, 0, 0], opacity=0.9999).to_primitives(), _front_camera())
    assert np.isclose(out.silhouette.max(), ALPHA_MAX)


def test_front_gaussian_occludes():
    cam = _front_camera()
    a = _single([0.2, 0.2, 0.2], [1, 0, 0, 0], opacity=0.99, mean=(0, 0, -0.5))
    b = _single([0.2, 0.2, 0.2], [1, 0, 0, 0], opacity=0.99, mean=(0, 0, 0.5))
    a.sh[0, 0] = 1.0
    b.sh[0, 0] = -1.0
    both = GaussianScene.concat([b, a])
    out, _ = render_forward(both.to_primitives(), cam)
    assert out.color[16, 16, 0] > 0.7  # the bright front one wins regardless of list order


@pytest.mark.parametrize("deg", [0.0, 30.0, 90.0, 135.0])
def test_orientation_of_elongated_gaussian(deg):
    cam = _front_camera()
    # long axis along x, rotated about the view axis; looking along +z both
    # image axes are flipped against world x/y, so the angle is preserved
    a = math.radians(deg)
    q = [math.cos(a / 2), 0, 0, math.sin(a / 2)]
    g = _single([0.3, 0.02, 0.02], q, opacity=0.9)
    out, ctx = render_forward(g.to_primitives(), cam)
    assert ctx.proj.mode[0] == AXIS_PRINCIPAL
    got = out.angle[16, 16]
    want = a % math.pi
    d = abs((got - want + math.pi / 2) % math.pi - math.pi / 2)
    assert d < 1e-9


def test_orientation_axis_sign_is_irrelevant():
    cam = _front_camera()
    g = _single([0.3, 0.02, 0.02], [0.9, 0.1, 0.2, 0.3], opacity=0.9)
    p = g.to_primitives()
    out1, _ = render_forward(p, cam)
    p.axes = -p.axes
    out2, _ = render_forward(p, cam)
    assert np.allclose(out1.orient_vec, out2.orient_vec)


def test_isotropic_gaussian_has_no_orientation():
    out, ctx = render_forward(_single([0.1, 0.1, 0.1], [1, 0, 0, 0]).to_primitives(), _front_camera())
    assert ctx.proj.mode[0] == AXIS_NONE
    assert not out.orient_valid.any()


def test_screen_mode_uses_covariance_major_axis():
    cam = _front_camera()
    # two long axes of equal length: 3D principal axis is ambiguous, screen shape is not
    g = _single([0.3, 0.3, 0.02], [1, 0, 0, 0])
    g.log_scales[0] = np.log([0.3, 0.1, 0.1])
    p = g.to_primitives()
    p.axis_mode[:] = AXIS_SCREEN
    out, ctx = render_forward(p, cam)
    assert ctx.proj.mode[0] == AXIS_SCREEN
    d = abs((out.angle[16, 16] + math.pi / 2) % math.pi - math.pi / 2)
    assert d < 1e-9  # major axis horizontal


def test_non_finite_parameters_rejected(rng):
    p = random_scene(rng, 3).to_primitives()
    p.means[1, 0] = np.nan
    with pytest.raises(NonFiniteParameter):
        render_forward(p, small_camera(rng))


def test_gradient_shape_mismatch_rejected(rng):
    cam = small_camera(rng, 16)
    _, ctx = render_forward(random_scene(rng, 3).to_primitives(), cam)
    with pytest.raises(StaleRender):
        render_backward(ctx, RenderGrads(color=np.zeros((8, 8, 3))))


def test_behind_camera_is_culled():
    cam = _front_camera()
    g = _single([0.1, 0.1, 0.1], [1, 0, 0, 0], mean=(0, 0, -3.0))
    out, ctx = render_forward(g.to_primitives(), cam)
    assert not ctx.proj.visible[0] and not out.silhouette.any()


def test_render_is_deterministic(rng):
    scene = random_scene(rng, 30)
    cam = small_camera(rng, 32)
    a, ca = render_forward(scene.to_primitives(), cam)
    b, cb = render_forward(scene.to_primitives(), cam)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.orient_vec, b.orient_vec)
    g = RenderGrads(color=np.ones((32, 32, 3)))
    assert np.array_equal(render_backward(ca, g).means, render_backward(cb, g).means)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    rel, _ = render_gradient_errors(np.random.default_rng(seed))
    assert max(rel.values()) < 1e-5, rel


def test_projection_covariance_matches_jacobian(rng):
    scene = random_scene(rng, 4)
    cam = small_camera(rng)
    prims = scene.to_primitives()
    proj = project(prims, cam, RenderSettings(eps2d=0.0))
    for i in range(4):
        J = proj.J[i] @ proj.R
        assert np.allclose(proj.cov2d[i], J @ prims.covs[i] @ J.T)
