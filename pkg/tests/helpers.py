"""Shared builders and a directional finite-difference checker."""

import numpy as np

from hairsplat.core import Camera, look_at
from hairsplat.gaussians import GaussianScene
from hairsplat.render import RenderGrads, RenderSettings, render_backward, render_forward

CHANNEL_SHAPES = {"color": 3, "label": 0, "conf": 0, "silhouette": 0, "orient_vec": 2}


def small_camera(rng, size=16, residual=True):
    R, t = look_at([0.3, -0.2, -2.0], [0, 0, 0])
    om = rng.normal(0, 0.01, 3) if residual else np.zeros(3)
    dt = rng.normal(0, 0.01, 3) if residual else np.zeros(3)
    return Camera(20.0, 22.0, size / 2 - 0.4, size / 2 + 0.3, size, size, R=R, t=t, omega=om, dt=dt)


def random_scene(rng, n=8, sh_degree=1):
    k = (sh_degree + 1) ** 2
    return GaussianScene(
        means=rng.uniform(-0.4, 0.4, (n, 3)),
        log_scales=np.log(rng.uniform(0.05, 0.3, (n, 3))),
        quats=rng.normal(size=(n, 4)),
        opacity_logit=rng.normal(0, 1, n),
        sh=rng.normal(0, 0.3, (n, k, 3)),
        label_logit=rng.normal(0, 1, n),
        log_conf=rng.normal(0, 0.5, n),
    )


def channel_weights(rng, h, w):
    out = {}
    for name, c in CHANNEL_SHAPES.items():
        out[name] = rng.normal(size=(h, w, c) if c else (h, w))
    return out


def linear_loss(out, weights):
    return sum(np.sum(getattr(out, k) * v) for k, v in weights.items())


def render_gradient_errors(rng, n=8, size=16, h=1e-6, settings=None):
    """Relative error of analytic vs central-difference directional derivatives
    of a random linear functional of every render channel, per parameter class."""
    settings = settings or RenderSettings(background=np.array([0.1, 0.2, 0.3]))
    scene = random_scene(rng, n)
    cam = small_camera(rng, size)
    W = channel_weights(rng, size, size)

    def loss(sc, c):
        out, ctx = render_forward(sc.to_primitives(), c, settings)
        return linear_loss(out, W), ctx

    _, ctx = loss(scene, cam)
    gb = scene.primitives_backward(render_backward(ctx, RenderGrads(**W)))
    errs = {}
    for name in GaussianScene.PARAMS:
        g = getattr(gb, name)
        v = rng.normal(size=g.shape)
        sp, sm = scene.copy(), scene.copy()
        getattr(sp, name)[...] += h * v
        getattr(sm, name)[...] -= h * v
        fd = (loss(sp, cam)[0] - loss(sm, cam)[0]) / (2 * h)
        errs[name] = (float(np.sum(g * v)), fd)
    for name in ("omega", "dt"):
        g = getattr(gb, "cam_" + name)
        v = rng.normal(size=3)
        dom = h * v if name == "omega" else 0.0
        ddt = h * v if name == "dt" else 0.0
        cp = cam.with_residual(cam.omega + dom, cam.dt + ddt)
        cm = cam.with_residual(cam.omega - dom, cam.dt - ddt)
        fd = (loss(scene, cp)[0] - loss(scene, cm)[0]) / (2 * h)
        errs["cam_" + name] = (float(g @ v), fd)
    return {k: abs(a - f) / max(abs(f), 1e-12) for k, (a, f) in errs.items()}, errs
