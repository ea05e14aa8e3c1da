"""Photometric, mask and orientation losses with hand-written gradients.

Every loss returns its value together with gradients on the render
channels it reads, so the trainers can push them straight into
``render_backward``.  All per-pixel terms are means over the pixels they
cover.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import InvalidInput, signed_undirected_difference
from .render import RenderGrads, RenderTargets

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EPS_TAU = 1e-6


@dataclass
class LossWeights:
    seg: float = 0.1
    dir: float = 0.1
    sds: float = 0.01
    ssim: float = 0.2

    def __post_init__(self):
        for k in ("seg", "dir", "sds", "ssim"):
            v = getattr(self, k)
            if not v >= 0:
                raise InvalidInput(f"loss weight {k} must be >= 0, got {v}")
        if self.ssim > 1:
            raise InvalidInput("ssim mix must lie in [0, 1]")


@dataclass
class ViewTargets:
    """Supervision for one view: image, masks and an orientation map."""

    color: np.ndarray  # (H, W, 3)
    hair_mask: np.ndarray  # (H, W) in [0, 1]
    body_mask: np.ndarray
    angle: np.ndarray  # (H, W) radians
    angle_valid: np.ndarray  # (H, W) bool


@dataclass
class LossResult:
    total: float
    terms: dict = field(default_factory=dict)
    grads: RenderGrads = field(default_factory=RenderGrads)


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidInput(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# SSIM


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_WIN = _gauss_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padded 'same' correlation over the two image axes
    y = correlate1d(x, _WIN, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WIN, axis=1, mode="constant", cval=0.0)


class _Window:
    """Window averages renormalized by the in-image window mass.

    The zero-padded blur is symmetric, so the adjoint of ``avg`` is
    ``blur(g / mass)``.
    """

    def __init__(self, shape):
        self.mass = _blur(np.ones(shape))

    def avg(self, x):
        return _blur(x) / self.mass

    def adjoint(self, g):
        return _blur(g / self.mass)


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0):
    """Per-pixel SSIM of two images (H, W[, C]) and the pieces its gradient needs."""
    _check_same(x, y, "ssim")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    win = _Window(x.shape)
    mx, my = win.avg(x), win.avg(y)
    sxx = win.avg(x * x) - mx * mx
    syy = win.avg(y * y) - my * my
    sxy = win.avg(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    s = a1 * a2 / (b1 * b2)
    return s, (win, mx, my, a1, a2, b1, b2)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    return float(ssim_map(x, y)[0].mean())


def ssim_with_grad(x: np.ndarray, y: np.ndarray, weight: np.ndarray | None = None):
    """Mean (optionally weighted) SSIM and its gradient with respect to ``x``."""
    s, (win, mx, my, a1, a2, b1, b2) = ssim_map(x, y)
    if weight is None:
        weight = np.full(s.shape, 1.0 / s.size)
    value = float((weight * s).sum())
    bb = b1 * b2
    d_mx = 2 * my * (a2 - a1) / bb + s * 2 * mx * (1 / b2 - 1 / b1)
    d_exx = -s / b2
    d_exy = 2 * a1 / bb
    grad = (
        win.adjoint(weight * d_mx)
        + 2 * x * win.adjoint(weight * d_exx)
        + y * win.adjoint(weight * d_exy)
    )
    return value, grad


# ---------------------------------------------------------------------------
# individual terms


def loss_rgb(render: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None, lam_ssim: float = 0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM).  Returns ``(value, dL/drender)``.

    ``mask`` (H, W) weights pixels; the mean is taken over its mass.
    """
    _check_same(render, target, "loss_rgb")
    h, w = render.shape[:2]
    n_ch = render.shape[2] if render.ndim == 3 else 1
    if mask is None:
        wpix = np.full((h, w), 1.0 / (h * w))
    else:
        if mask.shape != (h, w):
            raise InvalidInput(f"loss_rgb: mask shape {mask.shape} vs image {(h, w)}")
        total = float(mask.sum())
        wpix = mask / total if total > 0 else np.zeros((h, w))
    weight = wpix[..., None] / n_ch if render.ndim == 3 else wpix
    if render.ndim == 3:
        weight = np.broadcast_to(weight, render.shape)
    diff = render - target
    l1 = float((weight * np.abs(diff)).sum())
    g_l1 = weight * np.sign(diff)
    s_val, g_s = ssim_with_grad(render, target, weight)
    value = (1 - lam_ssim) * l1 + lam_ssim * (1.0 - s_val)
    grad = (1 - lam_ssim) * g_l1 - lam_ssim * g_s
    return value, grad


def loss_seg(silhouette, label, body_mask, hair_mask):
    """Mean over pixels of |s - body| + |l - hair|.

    Returns ``(value, d/d silhouette, d/d label)``.
    """
    _check_same(silhouette, body_mask, "loss_seg")
    _check_same(label, hair_mask, "loss_seg")
    n = silhouette.size
    ds = silhouette - body_mask
    dl = label - hair_mask
    value = float((np.abs(ds).sum() + np.abs(dl).sum()) / n)
    return value, np.sign(ds) / n, np.sign(dl) / n


def loss_dir(orient_vec, conf, gt_angle, gt_valid, gt_hair_mask, eps_tau: float = EPS_TAU):
    """Confidence-weighted undirected angular loss.

    Per pixel ``tau * d(beta, beta_gt) - log(tau + eps)`` averaged over pixels
    inside the GT hair mask where both orientations are valid.  ``beta`` is
    decoded from the doubled-angle vector, so the gradient goes to
    ``orient_vec`` and ``conf``.

    Returns ``(value, d/d orient_vec, d/d conf, n_pixels)``.
    """
    u, v = orient_vec[..., 0], orient_vec[..., 1]
    r2 = u * u + v * v
    valid = (gt_hair_mask > 0.5) & gt_valid & (r2 > 1e-6)
    n = int(valid.sum())
    g_vec = np.zeros_like(orient_vec)
    g_conf = np.zeros_like(conf)
    if n == 0:
        return 0.0, g_vec, g_conf, 0
    beta = 0.5 * np.arctan2(v[valid], u[valid])
    delta = signed_undirected_difference(beta, gt_angle[valid])
    d = np.abs(delta)
    tau = conf[valid]
    if np.any(tau < 0):
        raise InvalidInput("loss_dir: negative confidence")
    value = float((tau * d - np.log(tau + eps_tau)).sum() / n)
    g_conf[valid] = (d - 1.0 / (tau + eps_tau)) / n
    g_beta = tau * np.sign(delta) / n
    rv = r2[valid]
    g_vec[valid, 0] = g_beta * (-0.5 * v[valid] / rv)
    g_vec[valid, 1] = g_beta * (0.5 * u[valid] / rv)
    return value, g_vec, g_conf, n


# ---------------------------------------------------------------------------
# totals


def _photometric(render: RenderTargets, target: ViewTargets, weights: LossWeights, rgb_mask=None) -> LossResult:
    l_rgb, g_rgb = loss_rgb(render.color, target.color, rgb_mask, weights.ssim)
    l_seg, g_sil, g_lab = loss_seg(render.silhouette, render.label, target.body_mask, target.hair_mask)
    l_dir, g_vec, g_conf, n_dir = loss_dir(
        render.orient_vec, render.conf, target.angle, target.angle_valid, target.hair_mask
    )
    grads = RenderGrads(
        color=g_rgb,
        label=weights.seg * g_lab,
        silhouette=weights.seg * g_sil,
        conf=weights.dir * g_conf,
        orient_vec=weights.dir * g_vec,
    )
    total = l_rgb + weights.seg * l_seg + weights.dir * l_dir
    return LossResult(total, {"rgb": l_rgb, "seg": l_seg, "dir": l_dir, "dir_pixels": n_dir}, grads)


def loss_gaussian_total(render: RenderTargets, target: ViewTargets, weights: LossWeights, rgb_mask=None) -> LossResult:
    """L_rgb + w_seg * L_seg + w_dir * L_dir for the lifting stage."""
    res = _photometric(render, target, weights, rgb_mask)
    res.terms["total"] = res.total
    return res


def loss_strand_total(render: RenderTargets, target: ViewTargets, latent_reg: float, weights: LossWeights,
                      rgb_mask=None) -> LossResult:
    """Lifting objective plus ``w_sds * latent_reg``.

    The regularizer's own gradient is the caller's business; it only knows
    the value here and scales its gradient by ``weights.sds``.
    """
    res = _photometric(render, target, weights, rgb_mask)
    res.total = res.total + weights.sds * float(latent_reg)
    res.terms["reg"] = float(latent_reg)
    res.terms["total"] = res.total
    return res
