import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq

from hairsplat.core import InvalidInput
from hairsplat.losses import (
    SSIM_SIGMA,
    SSIM_WINDOW,
    LossWeights,
    loss_dir,
    loss_rgb,
    loss_seg,
    ssim,
    ssim_map,
    ssim_with_grad,
)


def ssim_reference(x, y):
    """Pixel-by-pixel SSIM with the Gaussian window cropped to the image and renormalized."""
    r = SSIM_WINDOW // 2
    k = np.arange(-r, r + 1)
    g1 = np.exp(-0.5 * (k / SSIM_SIGMA) ** 2)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = x.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            ii = k + i
            jj = k + j
            mi = (ii >= 0) & (ii < h)
            mj = (jj >= 0) & (jj < w)
            wgt = np.outer(g1[mi], g1[mj])
            wgt /= wgt.sum()
            px = x[np.ix_(ii[mi], jj[mj])]
            py = y[np.ix_(ii[mi], jj[mj])]
            mx, my = (wgt * px).sum(), (wgt * py).sum()
            vx = (wgt * px * px).sum() - mx * mx
            vy = (wgt * py * py).sum() - my * my
            cxy = (wgt * px * py).sum() - mx * my
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return out


def test_ssim_matches_pixelwise_reference(rng):
    x = rng.uniform(size=(13, 17))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    s, _ = ssim_map(x, y)
    assert np.allclose(s, ssim_reference(x, y), atol=1e-12)


def test_ssim_identity_and_channels(rng):
    x = rng.uniform(size=(12, 12, 3))
    assert np.isclose(ssim(x, x), 1.0)
    y = rng.uniform(size=(12, 12, 3))
    per = [ssim(x[..., c], y[..., c]) for c in range(3)]
    assert np.isclose(ssim(x, y), np.mean(per))


def test_ssim_constant_images_closed_form():
    # constant a vs constant b: only the luminance factor survives
    a, b = 0.3, 0.7
    c1 = 0.01 ** 2
    s = ssim(np.full((9, 9), a), np.full((9, 9), b))
    assert np.isclose(s, (2 * a * b + c1) / (a * a + b * b + c1))


def test_ssim_gradient_finite_difference(rng):
    x = rng.uniform(size=(10, 9))
    y = rng.uniform(size=(10, 9))
    wgt = rng.uniform(size=x.shape)
    _, g = ssim_with_grad(x, y, wgt)
    h = 1e-6
    for idx in [(0, 0), (4, 5), (9, 8), (2, 7)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = (ssim_with_grad(x + e, y, wgt)[0] - ssim_with_grad(x - e, y, wgt)[0]) / (2 * h)
        assert np.isclose(g[idx], fd, rtol=1e-6, atol=1e-10)


def test_loss_rgb_gradient_finite_difference(rng):
    x = rng.uniform(size=(8, 8, 3))
    y = rng.uniform(size=(8, 8, 3))
    m = (rng.uniform(size=(8, 8)) > 0.3).astype(float)
    _, g = loss_rgb(x, y, m)
    h = 1e-7
    for idx in [(0, 0, 0), (3, 4, 1), (7, 7, 2)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = (loss_rgb(x + e, y, m)[0] - loss_rgb(x - e, y, m)[0]) / (2 * h)
        assert np.isclose(g[idx], fd, rtol=1e-5, atol=1e-9)


def test_loss_rgb_pure_l1_and_empty_mask(rng):
    x = rng.uniform(size=(6, 6, 3))
    y = rng.uniform(size=(6, 6, 3))
    v, _ = loss_rgb(x, y, lam_ssim=0.0)
    assert np.isclose(v, np.abs(x - y).mean())
    v, g = loss_rgb(x, y, np.zeros((6, 6)), lam_ssim=0.0)
    assert v == 0 and not g.any()
    with pytest.raises(InvalidInput):
        loss_rgb(x, y[:5])


def test_loss_seg_value_and_gradient():
    s = np.array([[0.2, 0.9]])
    lab = np.array([[0.0, 0.6]])
    body = np.array([[0.0, 1.0]])
    hair = np.array([[0.0, 1.0]])
    v, gs, gl = loss_seg(s, lab, body, hair)
    assert np.isclose(v, (0.2 + 0.1 + 0.0 + 0.4) / 2)
    assert np.allclose(gs, [[0.5, -0.5]]) and np.allclose(gl, [[0.0, -0.5]])


def _dir_inputs(rng, n=6):
    ang = rng.uniform(0, np.pi, (n, n))
    vec = np.stack([np.cos(2 * ang), np.sin(2 * ang)], -1) * rng.uniform(0.3, 1, (n, n, 1))
    gt = rng.uniform(0, np.pi, (n, n))
    conf = rng.uniform(0.2, 3, (n, n))
    mask = (rng.uniform(size=(n, n)) > 0.3).astype(float)
    return vec, conf, gt, np.ones((n, n), bool), mask


def test_loss_dir_gradient_finite_difference(rng):
    vec, conf, gt, valid, mask = _dir_inputs(rng)
    _, gv, gc, n = loss_dir(vec, conf, gt, valid, mask)
    assert n == int((mask > 0.5).sum())
    h = 1e-7
    for idx in zip(*np.nonzero(mask > 0.5)):
        for c in range(2):
            e = np.zeros_like(vec)
            e[idx + (c,)] = h
            fd = (loss_dir(vec + e, conf, gt, valid, mask)[0] - loss_dir(vec - e, conf, gt, valid, mask)[0]) / (2 * h)
            assert np.isclose(gv[idx + (c,)], fd, rtol=1e-5, atol=1e-8)
        e = np.zeros_like(conf)
        e[idx] = h
        fd = (loss_dir(vec, conf + e, gt, valid, mask)[0] - loss_dir(vec, conf - e, gt, valid, mask)[0]) / (2 * h)
        assert np.isclose(gc[idx], fd, rtol=1e-5, atol=1e-8)


def test_loss_dir_is_pi_periodic(rng):
    vec, conf, gt, valid, mask = _dir_inputs(rng)
    a = loss_dir(vec, conf, gt, valid, mask)[0]
    b = loss_dir(vec, conf, gt + np.pi, valid, mask)[0]
    assert np.isclose(a, b)


@given(st.floats(0.01, np.pi / 2 - 0.01))
def test_confidence_stationary_point(d):
    # minimizer of tau * d - log(tau + eps) over tau, found from the gradient
    vec = np.array([[[1.0, 0.0]]])
    gt = np.array([[d]])
    one = np.ones((1, 1))

    def grad(tau):
        return loss_dir(vec, np.array([[tau]]), gt, one.astype(bool), one)[2][0, 0]

    tau = brentq(grad, 1e-3, 1e3, xtol=1e-14)
    assert abs(tau - 1 / d) < 1e-4


def test_negative_confidence_rejected():
    with pytest.raises(InvalidInput):
        loss_dir(np.array([[[1.0, 0]]]), np.array([[-0.1]]), np.zeros((1, 1)), np.ones((1, 1), bool), np.ones((1, 1)))


def test_weights_validated():
    with pytest.raises(InvalidInput):
        LossWeights(seg=-1)
    with pytest.raises(InvalidInput):
        LossWeights(ssim=1.5)
