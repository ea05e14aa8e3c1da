"""Differentiable splatting of anisotropic Gaussians into five render channels.

The renderer works on *activated* primitives (:class:`Primitives`): world
means, full 3D covariances, an orientation axis, opacity, SH color, hair
label and orientation confidence.  Parameterizations (log-scales and
quaternions for the unstructured scene, polyline points for strands) live in
their own modules and chain through :class:`PrimitiveGrads`.

Per pixel the renderer blends eight channels front to back:
``rgb(3) | label | confidence | silhouette | cos 2b | sin 2b``.
Orientation is blended as the doubled-angle unit vector so that the
pi-periodic line angle averages continuously.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from .planes import save_png, write_planes
from .core import (
    Camera,
    apply_camera_residual,
    camera_residual_backward,
    jacobian_from_camera_points,
    sh_basis,
    sh_basis_grad,
)

N_CH = 8
CH_RGB = slice(0, 3)
CH_LABEL = 3
CH_CONF = 4
CH_SIL = 5
CH_ORIENT = slice(6, 8)

AXIS_PRINCIPAL = 0  # beta from the projected 3D axis
AXIS_SCREEN = 1  # beta from the major axis of the screen covariance
AXIS_NONE = 2  # contributes no orientation

ORIENT_VALID_NORM = 1e-3


class NonFiniteParameter(ValueError):
    def __init__(self, index: int, what: str):
        super().__init__(f"non-finite {what} for primitive {index}")
        self.index = index


class StaleRender(RuntimeError):
    """Backward called with intermediates that do not match the gradient."""


@dataclass
class RenderSettings:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tile: int = 16
    eps2d: float = 0.3
    sigma_cut: float = 3.0
    alpha_min: float = raster.ALPHA_MIN
    aniso_ratio: float = 1.05


@dataclass
class Primitives:
    means: np.ndarray  # (N, 3)
    covs: np.ndarray  # (N, 3, 3)
    axes: np.ndarray  # (N, 3), need not be unit
    axis_mode: np.ndarray  # (N,) int8
    opacity: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)
    label: np.ndarray  # (N,)
    conf: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @staticmethod
    def concat(parts: list["Primitives"]) -> "Primitives":
        return Primitives(*(np.concatenate([getattr(p, f) for p in parts]) for f in Primitives.__dataclass_fields__))

    @staticmethod
    def empty(sh_degree: int = 1) -> "Primitives":
        k = (sh_degree + 1) ** 2
        return Primitives(
            np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, np.int8),
            np.zeros(0), np.zeros((0, k, 3)), np.zeros(0), np.zeros(0),
        )


@dataclass
class PrimitiveGrads:
    means: np.ndarray
    covs: np.ndarray
    axes: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    label: np.ndarray
    conf: np.ndarray
    means2d: np.ndarray  # screen-space mean gradient, for densification statistics
    cam_omega: np.ndarray
    cam_dt: np.ndarray

    def slice(self, sl: slice) -> "PrimitiveGrads":
        kw = {f: getattr(self, f)[sl] for f in ("means", "covs", "axes", "opacity", "sh", "label", "conf", "means2d")}
        return PrimitiveGrads(**kw, cam_omega=self.cam_omega, cam_dt=self.cam_dt)


@dataclass
class Projected:
    """Screen-space state of every primitive for one camera."""

    means2d: np.ndarray
    cov2d: np.ndarray  # (N, 2, 2) conditioned
    conics: np.ndarray  # (N, 3)
    depths: np.ndarray
    radii: np.ndarray
    visible: np.ndarray
    feats: np.ndarray  # (N, 8)
    orient_valid: np.ndarray
    # intermediates for the backward pass
    R: np.ndarray
    t: np.ndarray
    cam_pos: np.ndarray
    xc: np.ndarray
    J: np.ndarray
    M: np.ndarray
    axis2d: np.ndarray
    basis: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    rgb_free: np.ndarray  # (N, 3) True where the color clamp is inactive
    mode: np.ndarray

    @property
    def angles(self) -> np.ndarray:
        """Per-primitive screen angle in [0, pi); NaN where orientation-invalid."""
        ov = self.feats[:, CH_ORIENT]
        beta = np.mod(0.5 * np.arctan2(ov[:, 1], ov[:, 0]), np.pi)
        return np.where(self.orient_valid, beta, np.nan)


@dataclass
class RenderTargets:
    color: np.ndarray  # (H, W, 3)
    label: np.ndarray  # (H, W)
    conf: np.ndarray
    silhouette: np.ndarray
    orient_vec: np.ndarray  # (H, W, 2)

    @property
    def angle(self) -> np.ndarray:
        return np.mod(0.5 * np.arctan2(self.orient_vec[..., 1], self.orient_vec[..., 0]), np.pi)

    @property
    def orient_valid(self) -> np.ndarray:
        return np.hypot(self.orient_vec[..., 0], self.orient_vec[..., 1]) > ORIENT_VALID_NORM

    @classmethod
    def from_channels(cls, img: np.ndarray) -> "RenderTargets":
        return cls(
            color=img[..., CH_RGB],
            label=img[..., CH_LABEL],
            conf=img[..., CH_CONF],
            silhouette=img[..., CH_SIL],
            orient_vec=img[..., CH_ORIENT],
        )


@dataclass
class RenderGrads:
    """Upstream gradients on the render channels; ``None`` means zero."""

    color: np.ndarray | None = None
    label: np.ndarray | None = None
    conf: np.ndarray | None = None
    silhouette: np.ndarray | None = None
    orient_vec: np.ndarray | None = None

    def stack(self, h: int, w: int) -> np.ndarray:
        out = np.zeros((h, w, N_CH))
        for value, ch in (
            (self.color, CH_RGB),
            (self.label, CH_LABEL),
            (self.conf, CH_CONF),
            (self.silhouette, CH_SIL),
            (self.orient_vec, CH_ORIENT),
        ):
            if value is not None:
                if value.shape[:2] != (h, w):
                    raise StaleRender(f"gradient shape {value.shape} does not match image {(h, w)}")
                out[..., ch] = value
        return out

    def __add__(self, other: "RenderGrads") -> "RenderGrads":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return RenderGrads(*(add(getattr(self, f), getattr(other, f)) for f in self.__dataclass_fields__))

    def scaled(self, s: float) -> "RenderGrads":
        return RenderGrads(*(None if getattr(self, f) is None else s * getattr(self, f) for f in self.__dataclass_fields__))


@dataclass
class RenderContext:
    prims: Primitives
    cam: Camera
    settings: RenderSettings
    proj: Projected
    tile_ranges: np.ndarray
    ids: np.ndarray
    final_T: np.ndarray
    n_contrib: np.ndarray
    bg: np.ndarray


def _check_finite(prims: Primitives) -> None:
    for name in ("means", "covs", "axes", "opacity", "sh", "label", "conf"):
        arr = getattr(prims, name)
        if arr.size == 0:
            continue
        bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
        if bad.any():
            raise NonFiniteParameter(int(np.flatnonzero(bad)[0]), name)


def project(prims: Primitives, cam: Camera, settings: RenderSettings) -> Projected:
    """Screen-space means, conditioned covariances and blended features."""
    n = len(prims)
    R, t = apply_camera_residual(cam)
    cam_pos = -R.T @ t
    xc = prims.means @ R.T + t
    z = xc[:, 2]
    visible = z > cam.near
    zs = np.where(visible, z, 1.0)
    xcs = np.where(visible[:, None], xc, np.array([0.0, 0.0, 1.0]))
    J = jacobian_from_camera_points(cam, xcs)
    M = J @ R
    cov2d = M @ prims.covs @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += settings.eps2d
    cov2d[:, 1, 1] += settings.eps2d
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(det > 0, det, np.nan)
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
    lam1, lam2 = half_tr + disc, half_tr - disc
    radii = settings.sigma_cut * np.sqrt(lam1)
    visible &= np.isfinite(det) & np.isfinite(radii)
    means2d = np.stack([cam.fx * xcs[:, 0] / zs + cam.cx, cam.fy * xcs[:, 1] / zs + cam.cy], axis=1)

    # color
    deg = prims.sh_degree
    d = prims.means - cam_pos
    dist = np.linalg.norm(d, axis=1)
    dist = np.where(dist > 0, dist, 1.0)
    dirs = d / dist[:, None]
    basis = sh_basis(dirs, deg)
    rgb = np.einsum("nk,nkc->nc", basis, prims.sh) + 0.5
    rgb_free = (rgb > 0.0) & (rgb < 1.0)
    rgb = np.clip(rgb, 0.0, 1.0)

    # orientation
    mode = prims.axis_mode.astype(np.int8).copy()
    axis2d = np.einsum("nij,nj->ni", M, prims.axes)
    n2 = np.sum(axis2d * axis2d, axis=1)
    diff = a - c
    r = np.hypot(diff, 2 * b)
    ov = np.zeros((n, 2))
    screen_iso = ~(lam1 >= settings.aniso_ratio * lam2)
    m0 = (mode == AXIS_PRINCIPAL) & (n2 > 1e-20)
    m1 = (mode == AXIS_SCREEN) & (r > 0)
    valid = (m0 | m1) & ~screen_iso & visible
    mode[~valid] = AXIS_NONE
    s0 = valid & m0
    s1 = valid & m1 & ~m0
    mode[s1] = AXIS_SCREEN
    ax, ay = axis2d[s0, 0], axis2d[s0, 1]
    ov[s0, 0] = (ax * ax - ay * ay) / n2[s0]
    ov[s0, 1] = 2 * ax * ay / n2[s0]
    ov[s1, 0] = diff[s1] / r[s1]
    ov[s1, 1] = 2 * b[s1] / r[s1]

    feats = np.empty((n, N_CH))
    feats[:, CH_RGB] = rgb
    feats[:, CH_LABEL] = prims.label
    feats[:, CH_CONF] = prims.conf
    feats[:, CH_SIL] = 1.0
    feats[:, CH_ORIENT] = ov

    return Projected(
        means2d=means2d, cov2d=cov2d, conics=np.nan_to_num(conics), depths=z, radii=np.nan_to_num(radii),
        visible=visible, feats=feats, orient_valid=valid, R=R, t=t, cam_pos=cam_pos, xc=xcs, J=J, M=M,
        axis2d=axis2d, basis=basis, view_dirs=dirs, view_dist=dist, rgb_free=rgb_free, mode=mode,
    )


def sort_and_bin(proj: Projected, width: int, height: int, tile: int = 16, sigma_cut: float = 3.0):
    """Per-tile, depth-ascending primitive index lists.

    Returns ``(tile_ranges, ids)``; ties in depth keep index order.
    """
    depth = np.where(proj.visible, proj.depths, np.inf)
    order = np.argsort(depth, kind="stable").astype(np.int64)
    return raster.bin_primitives(
        order, proj.means2d, proj.conics, proj.radii, proj.visible, width, height, tile, sigma_cut
    )


def render_forward(prims: Primitives, cam: Camera, settings: RenderSettings | None = None):
    """Rasterize ``prims`` through ``cam``; returns ``(RenderTargets, RenderContext)``."""
    settings = settings or RenderSettings()
    _check_finite(prims)
    w, h = cam.width, cam.height
    bg = np.zeros(N_CH)
    bg[CH_RGB] = settings.background
    proj = project(prims, cam, settings)
    ranges, ids = sort_and_bin(proj, w, h, settings.tile, settings.sigma_cut)
    img, final_T, n_contrib = raster.composite_forward(
        ranges, ids, proj.means2d, proj.conics, prims.opacity.astype(np.float64), proj.feats, bg,
        w, h, settings.tile, settings.alpha_min,
    )
    ctx = RenderContext(prims, cam, settings, proj, ranges, ids, final_T, n_contrib, bg)
    return RenderTargets.from_channels(img), ctx


def render_backward(ctx: RenderContext, grads: RenderGrads) -> PrimitiveGrads:
    """Exact adjoint of :func:`render_forward` with the depth order held fixed."""
    cam, prims, proj = ctx.cam, ctx.prims, ctx.proj
    n = len(prims)
    if proj.means2d.shape[0] != n:
        raise StaleRender("render context does not match its primitives")
    w, h = cam.width, cam.height
    g_img = grads.stack(h, w)
    acc = raster.composite_backward(
        ctx.tile_ranges, ctx.ids, proj.means2d, proj.conics, prims.opacity.astype(np.float64), proj.feats,
        ctx.bg, w, h, ctx.settings.tile, ctx.settings.alpha_min, ctx.final_T, ctx.n_contrib, g_img,
    )
    red = raster.reduce_pairs(ctx.ids, acc, n)
    g_m2d = red[:, raster.ACC_MX:raster.ACC_MY + 1]
    g_conic = red[:, raster.ACC_A:raster.ACC_C + 1]
    g_opac = red[:, raster.ACC_O].copy()
    g_feat = red[:, raster.ACC_FEAT:]
    return _preprocess_backward(ctx, g_m2d, g_conic, g_opac, g_feat)


def _preprocess_backward(ctx: RenderContext, g_m2d, g_conic, g_opac, g_feat) -> PrimitiveGrads:
    cam, prims, proj = ctx.cam, ctx.prims, ctx.proj
    R, t, M, J = proj.R, proj.t, proj.M, proj.J
    vis = proj.visible
    g_means = np.zeros_like(prims.means)
    g_R = np.zeros((3, 3))
    g_t = np.zeros(3)

    # color -> sh, view direction
    g_rgb = g_feat[:, CH_RGB] * proj.rgb_free
    g_sh = np.einsum("nk,nc->nkc", proj.basis, g_rgb)
    if prims.sh.shape[1] > 1:
        dbasis = sh_basis_grad(proj.view_dirs, prims.sh_degree)  # (N, K, 3)
        g_dir = np.einsum("nkd,nkc,nc->nd", dbasis, prims.sh, g_rgb)
        dirs = proj.view_dirs
        g_d = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / proj.view_dist[:, None]
        g_means += g_d
        g_campos = -g_d.sum(axis=0)
        # cam_pos = -R^T t
        g_R += -np.outer(t, g_campos)
        g_t += -R @ g_campos

    # orientation feature
    g_ov = g_feat[:, CH_ORIENT]
    g_S = np.zeros((len(prims), 2, 2))
    g_M = np.zeros_like(M)
    g_axes = np.zeros_like(prims.axes)
    s0 = proj.mode == AXIS_PRINCIPAL
    if s0.any():
        a2 = proj.axis2d[s0]
        ax, ay = a2[:, 0], a2[:, 1]
        n2 = ax * ax + ay * ay
        inv = 1.0 / (n2 * n2)
        gx, gy = g_ov[s0, 0], g_ov[s0, 1]
        g_ax = (gx * 4 * ax * ay * ay + gy * 2 * ay * (ay * ay - ax * ax)) * inv
        g_ay = (-gx * 4 * ax * ax * ay + gy * 2 * ax * (ax * ax - ay * ay)) * inv
        g_a2 = np.stack([g_ax, g_ay], axis=1)
        g_M[s0] += g_a2[:, :, None] * prims.axes[s0][:, None, :]
        g_axes[s0] = np.einsum("nij,ni->nj", M[s0], g_a2)
    s1 = proj.mode == AXIS_SCREEN
    if s1.any():
        S = proj.cov2d[s1]
        e = np.stack([S[:, 0, 0] - S[:, 1, 1], 2 * S[:, 0, 1]], axis=1)
        r = np.linalg.norm(e, axis=1, keepdims=True)
        ov = e / r
        g_e = (g_ov[s1] - ov * np.sum(ov * g_ov[s1], axis=1, keepdims=True)) / r
        g_S[s1, 0, 0] += g_e[:, 0]
        g_S[s1, 1, 1] -= g_e[:, 0]
        g_S[s1, 0, 1] += g_e[:, 1]
        g_S[s1, 1, 0] += g_e[:, 1]

    # conic -> conditioned screen covariance: G_S += -K G_K K
    K = np.empty((len(prims), 2, 2))
    K[:, 0, 0] = proj.conics[:, 0]
    K[:, 0, 1] = K[:, 1, 0] = proj.conics[:, 1]
    K[:, 1, 1] = proj.conics[:, 2]
    G_K = np.empty_like(K)
    G_K[:, 0, 0] = g_conic[:, 0]
    G_K[:, 0, 1] = G_K[:, 1, 0] = 0.5 * g_conic[:, 1]
    G_K[:, 1, 1] = g_conic[:, 2]
    g_S -= K @ G_K @ K
    g_S = 0.5 * (g_S + np.swapaxes(g_S, 1, 2))

    # S = M Sigma M^T + eps I
    g_covs = np.swapaxes(M, 1, 2) @ g_S @ M
    g_M += 2.0 * g_S @ M @ prims.covs

    # M = J R
    g_J = g_M @ R.T
    g_R += np.einsum("nij,nik->jk", J, g_M)

    # screen mean and Jacobian -> camera-frame point
    xc = proj.xc
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    iz = 1.0 / z
    fx, fy = cam.fx, cam.fy
    g_xc = np.einsum("nij,ni->nj", J, g_m2d)
    g_xc[:, 0] += g_J[:, 0, 2] * (-fx * iz * iz)
    g_xc[:, 1] += g_J[:, 1, 2] * (-fy * iz * iz)
    g_xc[:, 2] += (
        g_J[:, 0, 0] * (-fx * iz * iz)
        + g_J[:, 0, 2] * (2 * fx * x * iz ** 3)
        + g_J[:, 1, 1] * (-fy * iz * iz)
        + g_J[:, 1, 2] * (2 * fy * y * iz ** 3)
    )
    g_xc[~vis] = 0.0
    g_covs[~vis] = 0.0
    g_axes[~vis] = 0.0

    # xc = R mu + t
    g_means += g_xc @ R
    g_R += g_xc.T @ prims.means
    g_t += g_xc.sum(axis=0)

    g_omega, g_dt = camera_residual_backward(cam, g_R, g_t)
    return PrimitiveGrads(
        means=g_means,
        covs=g_covs,
        axes=g_axes,
        opacity=g_opac,
        sh=g_sh,
        label=g_feat[:, CH_LABEL].copy(),
        conf=g_feat[:, CH_CONF].copy(),
        means2d=g_m2d.copy(),
        cam_omega=g_omega,
        cam_dt=g_dt,
    )


# ---------------------------------------------------------------------------
# render dumps


def save_render(targets: RenderTargets, directory: str | Path, stem: str) -> None:
    """Write color/mask PNGs plus float32 planes with a JSON sidecar."""
    directory = Path(directory)
    save_png(directory / f"{stem}_color.png", targets.color)
    save_png(directory / f"{stem}_silhouette.png", targets.silhouette)
    save_png(directory / f"{stem}_label.png", targets.label)
    write_planes(directory, stem, {
        "orient_x": targets.orient_vec[..., 0],
        "orient_y": targets.orient_vec[..., 1],
        "confidence": targets.conf,
    }, kind="render")
