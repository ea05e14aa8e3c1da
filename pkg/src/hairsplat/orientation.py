"""2D orientation maps: Gabor filter-bank estimation, exact line-render
oracle maps from polylines, and the undirected angular error metric.

Angles are screen angles of line directions in pixel coordinates
(x right, y down), reduced to [0, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numba as nb
import numpy as np
from scipy.signal import fftconvolve

from .core import Camera, InvalidInput, NEAR_PLANE, angular_distance_undirected, apply_camera_residual
from .planes import read_planes, save_png, write_planes


@dataclass
class OrientationMap:
    angle: np.ndarray  # (H, W) in [0, pi)
    confidence: np.ndarray  # (H, W) >= 0
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.angle = np.mod(np.asarray(self.angle, float), np.pi)
        self.valid = np.asarray(self.valid, bool)
        if not (self.angle.shape == self.confidence.shape == self.valid.shape):
            raise InvalidInput("orientation map planes must share a shape")

    @property
    def shape(self):
        return self.angle.shape

    @staticmethod
    def empty(height: int, width: int) -> "OrientationMap":
        return OrientationMap(np.zeros((height, width)), np.zeros((height, width)), np.zeros((height, width), bool))

    @staticmethod
    def from_render(targets) -> "OrientationMap":
        """Pack a render's blended orientation; confidence is tau times validity."""
        valid = targets.orient_valid
        return OrientationMap(targets.angle, targets.conf * valid, valid)

    def save(self, directory: str | Path, stem: str, png: bool = True) -> None:
        write_planes(directory, stem, {
            "angle": self.angle,
            "confidence": self.confidence,
            "valid": self.valid.astype(float),
        }, kind="orientation")
        if png:
            save_png(Path(directory) / f"{stem}_orient.png", self.visualize())

    @staticmethod
    def load(directory: str | Path, stem: str) -> "OrientationMap":
        planes, _ = read_planes(directory, stem, kind="orientation")
        return OrientationMap(planes["angle"], planes["confidence"], planes["valid"] > 0.5)

    def visualize(self) -> np.ndarray:
        """RGB image with hue = angle / pi and value = confidence (0 where invalid)."""
        from PIL import Image

        conf = self.confidence
        top = conf[self.valid].max() if self.valid.any() else 1.0
        val = np.where(self.valid, np.clip(conf / max(top, 1e-12), 0, 1), 0.0)
        hsv = np.stack([self.angle / np.pi, np.ones_like(val), val], axis=-1)
        hsv8 = (np.clip(hsv, 0, 1) * 255 + 0.5).astype(np.uint8)
        return np.asarray(Image.fromarray(hsv8, mode="HSV").convert("RGB"), float) / 255.0


# ---------------------------------------------------------------------------
# Gabor bank


@dataclass(frozen=True)
class GaborConfig:
    n_orient: int = 32
    wavelength: float = 4.0
    sigma_along: float = 1.8  # along the carrier, i.e. across the stripes
    sigma_across: float = 2.4  # along the stripes
    valid_threshold: float = 0.02


@lru_cache(maxsize=8)
def gabor_bank(cfg: GaborConfig = GaborConfig()) -> np.ndarray:
    """Odd-phase kernels, shape (K, S, S); kernel k detects lines at angle k*pi/K."""
    r = int(math.ceil(3 * max(cfg.sigma_along, cfg.sigma_across)))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    kernels = []
    for k in range(cfg.n_orient):
        th = k * np.pi / cfg.n_orient
        a = xx * np.cos(th) + yy * np.sin(th)  # along the line
        b = -xx * np.sin(th) + yy * np.cos(th)  # across the line
        env = np.exp(-0.5 * (b / cfg.sigma_along) ** 2 - 0.5 * (a / cfg.sigma_across) ** 2)
        ker = env * np.sin(2 * np.pi * b / cfg.wavelength)
        kernels.append(ker / np.sqrt((ker ** 2).sum()))
    out = np.stack(kernels)
    out.setflags(write=False)
    return out


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, float)
    if image.ndim == 3:
        return image[..., :3] @ np.array([0.299, 0.587, 0.114])
    return image


def gabor_orientation_map(image: np.ndarray, cfg: GaborConfig = GaborConfig()) -> OrientationMap:
    gray = luminance(image)
    bank = gabor_bank(cfg)
    size = bank.shape[-1]
    r = size // 2
    h, w = gray.shape
    if h < size or w < size:
        raise InvalidInput(f"image {h}x{w} is smaller than the {size}x{size} Gabor kernel")
    padded = np.pad(gray, r, mode="reflect")
    resp = np.abs(np.stack([fftconvolve(padded, k, mode="valid") for k in bank]))
    K = cfg.n_orient
    best = np.argmax(resp, axis=0)
    rows, cols = np.indices((h, w))
    r0 = resp[best, rows, cols]
    rm = resp[(best - 1) % K, rows, cols]
    rp = resp[(best + 1) % K, rows, cols]
    den = rm - 2 * r0 + rp
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(den < -1e-12, 0.5 * (rm - rp) / den, 0.0)
    off = np.clip(off, -0.5, 0.5)
    angle = np.mod((best + off) * np.pi / K, np.pi)
    var = resp.var(axis=0)
    top = var.max()
    conf = var / top if top > 1e-20 else np.zeros_like(var)
    return OrientationMap(angle, conf, conf > cfg.valid_threshold)


# ---------------------------------------------------------------------------
# line rasterization


@nb.njit(cache=True)
def _raster_segments(p0, p1, z0, z1, feats, width, height, zbuf, out, seg_id, thickness):
    """Z-buffered DDA rasterization of screen segments, in order.

    The major axis is sampled at every integer pixel center between the
    endpoints; the minor coordinate is rounded half up (one pixel) or, for
    ``thickness > 1``, covers the band of the given perpendicular width.
    Depth is interpolated perspective-correctly.
    """
    for s in range(p0.shape[0]):
        if z0[s] <= 0.0 or z1[s] <= 0.0:
            continue
        dx = p1[s, 0] - p0[s, 0]
        dy = p1[s, 1] - p0[s, 1]
        x_major = abs(dx) >= abs(dy)
        if x_major:
            a0, a1, b0, b1 = p0[s, 0], p1[s, 0], p0[s, 1], p1[s, 1]
            na, nb_ = width, height
        else:
            a0, a1, b0, b1 = p0[s, 1], p1[s, 1], p0[s, 0], p1[s, 0]
            na, nb_ = height, width
        iz0, iz1 = 1.0 / z0[s], 1.0 / z1[s]
        if a1 < a0:
            a0, a1 = a1, a0
            b0, b1 = b1, b0
            iz0, iz1 = iz1, iz0
        span = a1 - a0
        if span < 1e-12:
            continue
        slope = (b1 - b0) / span
        half = 0.5 * thickness * math.sqrt(1.0 + slope * slope)
        i_lo = max(int(math.ceil(a0)), 0)
        i_hi = min(int(math.floor(a1)), na - 1)
        for i in range(i_lo, i_hi + 1):
            t = (i - a0) / span
            m = b0 + t * (b1 - b0)
            if thickness <= 1.0:
                j_lo = int(math.floor(m + 0.5))
                j_hi = j_lo
            else:
                j_lo = int(math.ceil(m - half))
                j_hi = int(math.floor(m + half))
            z = 1.0 / ((1.0 - t) * iz0 + t * iz1)
            for j in range(max(j_lo, 0), min(j_hi, nb_ - 1) + 1):
                if x_major:
                    px, py = i, j
                else:
                    px, py = j, i
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    seg_id[py, px] = s
                    for c in range(feats.shape[1]):
                        out[py, px, c] = feats[s, c]


def project_polylines(strands: np.ndarray, cam: Camera):
    """Pixel coordinates (N, L, 2) and depths (N, L) of polyline points."""
    R, t = apply_camera_residual(cam)
    xc = strands @ R.T + t
    z = xc[..., 2]
    zs = np.where(z > NEAR_PLANE, z, np.nan)
    px = np.stack([cam.fx * xc[..., 0] / zs + cam.cx, cam.fy * xc[..., 1] / zs + cam.cy], axis=-1)
    return px, z


def segment_arrays(strands, cam: Camera):
    """Flattened screen segments of a strand batch: p0, p1, z0, z1 and the
    per-segment screen angle mod pi.  Segments touching the near plane are
    given non-positive depth so the rasterizer drops them."""
    strands = np.asarray(strands, float)
    if strands.ndim == 2:
        strands = strands[None]
    px, z = project_polylines(strands, cam)
    p0 = px[:, :-1].reshape(-1, 2)
    p1 = px[:, 1:].reshape(-1, 2)
    z0 = z[:, :-1].reshape(-1).copy()
    z1 = z[:, 1:].reshape(-1).copy()
    bad = ~(np.isfinite(p0).all(1) & np.isfinite(p1).all(1) & (z0 > NEAR_PLANE) & (z1 > NEAR_PLANE))
    z0[bad] = -1.0
    z1[bad] = -1.0
    p0 = np.where(bad[:, None], 0.0, p0)
    p1 = np.where(bad[:, None], 0.0, p1)
    d = p1 - p0
    ang = np.mod(np.arctan2(d[:, 1], d[:, 0]), np.pi)
    return p0, p1, z0, z1, ang


def rasterize_lines(p0, p1, z0, z1, feats, width, height, thickness: float = 1.0, zbuf=None):
    """Rasterize segments; returns (features (H, W, C), depth, segment id or -1)."""
    feats = np.ascontiguousarray(feats, float)
    if feats.ndim == 1:
        feats = feats[:, None]
    zb = np.full((height, width), np.inf) if zbuf is None else np.array(zbuf, float, copy=True)
    out = np.zeros((height, width, feats.shape[1]))
    ids = np.full((height, width), -1, np.int64)
    _raster_segments(np.ascontiguousarray(p0, float), np.ascontiguousarray(p1, float),
                     np.ascontiguousarray(z0, float), np.ascontiguousarray(z1, float),
                     feats, width, height, zb, out, ids, float(thickness))
    return out, zb, ids


def oracle_orientation_map(strands, cam: Camera, width: int = 1, zbuf=None) -> OrientationMap:
    """Ground-truth map: each covered pixel takes the front-most segment's angle.

    ``zbuf`` optionally pre-loads occluder depths (e.g. the head) so hidden
    strand pixels stay invalid.
    """
    p0, p1, z0, z1, ang = segment_arrays(strands, cam)
    out, _, ids = rasterize_lines(p0, p1, z0, z1, ang, cam.width, cam.height, float(width), zbuf)
    valid = ids >= 0
    return OrientationMap(np.where(valid, out[..., 0], 0.0), valid.astype(float), valid)


# ---------------------------------------------------------------------------
# metric


@dataclass
class OrientationError:
    mean_deg: float | None  # None when the maps share no valid pixel
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        return {"mean_deg": self.mean_deg, "count": self.count, "empty": self.empty}


def orientation_error(pred: OrientationMap, gt: OrientationMap, mask: np.ndarray | None = None) -> OrientationError:
    if pred.shape != gt.shape:
        raise InvalidInput(f"orientation_error: shapes {pred.shape} vs {gt.shape}")
    both = pred.valid & gt.valid
    if mask is not None:
        both &= mask
    n = int(both.sum())
    if n == 0:
        return OrientationError(None, 0)
    d = angular_distance_undirected(pred.angle[both], gt.angle[both])
    return OrientationError(float(np.degrees(d).mean()), n)


def pooled_error(pairs) -> OrientationError:
    """Pixel-weighted mean over several (pred, gt[, mask]) pairs."""
    total, count = 0.0, 0
    for pair in pairs:
        e = orientation_error(*pair)
        if e.count:
            total += e.mean_deg * e.count
            count += e.count
    return OrientationError(total / count if count else None, count)
