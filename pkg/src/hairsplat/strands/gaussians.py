"""Strand-aligned Gaussians: one thin opaque Gaussian per polyline segment.

A segment v = p[l+1] - p[l] gives mean (p[l] + p[l+1]) / 2, scales
(|v|/2, eps, eps) and a rotation taking the x axis to v/|v|.  For
rendering the covariance is formed directly from v,

    Sigma = eps^2 I + (1/4 - eps^2/|v|^2) v v^T,

which equals R diag(s)^2 R^T for any rotation with first column v/|v|, so
the gradient never touches the quaternion branch cut at v = -x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Camera, apply_camera_residual, jacobian_from_camera_points
from ..render import AXIS_PRINCIPAL, PrimitiveGrads, Primitives

HAIR_RADIUS = 2e-4
MIN_SEGMENT = 1e-12


def segment_quaternions(v: np.ndarray) -> np.ndarray:
    """Minimal rotations (w, x, y, z) taking +x to each direction in ``v``.

    The antipodal case (v along -x) rotates by pi about +z.
    """
    d = v / np.linalg.norm(v, axis=-1, keepdims=True)
    w = 1.0 + d[..., 0]
    q = np.stack([w, np.zeros_like(w), -d[..., 2], d[..., 1]], axis=-1)  # x cross d = (0, -dz, dy)
    anti = w < 1e-12
    q[anti] = (0.0, 0.0, 0.0, 1.0)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


@dataclass
class StrandGaussians:
    means: np.ndarray  # (S, 3)
    vec: np.ndarray  # (S, 3) segment vectors
    scales: np.ndarray  # (S, 3)
    quats: np.ndarray  # (S, 4)
    opacity: np.ndarray
    label: np.ndarray
    conf: np.ndarray
    sh: np.ndarray  # (S, K, 3)
    strand: np.ndarray  # (S,) owning strand
    segment: np.ndarray  # (S,) segment index along the strand
    n_skipped: int
    eps: float

    def __len__(self) -> int:
        return len(self.means)

    def to_primitives(self) -> Primitives:
        v = self.vec
        n2 = np.einsum("ij,ij->i", v, v)
        c = 0.25 - self.eps ** 2 / n2
        covs = self.eps ** 2 * np.eye(3) + c[:, None, None] * v[:, :, None] * v[:, None, :]
        return Primitives(
            means=self.means,
            covs=covs,
            axes=v,
            axis_mode=np.full(len(v), AXIS_PRINCIPAL, np.int8),
            opacity=self.opacity,
            sh=self.sh,
            label=self.label,
            conf=self.conf,
        )


def strands_to_gaussians(points: np.ndarray, sh: np.ndarray, eps: float = HAIR_RADIUS) -> StrandGaussians:
    """Convert strands (N, L, 3) with per-strand SH (N, K, 3)."""
    points = np.asarray(points, float)
    n, L, _ = points.shape
    v = (points[:, 1:] - points[:, :-1]).reshape(-1, 3)
    mid = 0.5 * (points[:, 1:] + points[:, :-1]).reshape(-1, 3)
    strand = np.repeat(np.arange(n), L - 1)
    seg = np.tile(np.arange(L - 1), n)
    length = np.linalg.norm(v, axis=1)
    keep = length > MIN_SEGMENT
    v, mid, strand, seg, length = v[keep], mid[keep], strand[keep], seg[keep], length[keep]
    m = len(v)
    scales = np.stack([0.5 * length, np.full(m, eps), np.full(m, eps)], axis=1)
    return StrandGaussians(
        means=mid,
        vec=v,
        scales=scales,
        quats=segment_quaternions(v) if m else np.zeros((0, 4)),
        opacity=np.ones(m),
        label=np.ones(m),
        conf=np.ones(m),
        sh=np.asarray(sh, float)[strand],
        strand=strand,
        segment=seg,
        n_skipped=int((~keep).sum()),
        eps=eps,
    )


def strand_gaussians_backward(sg: StrandGaussians, pg: PrimitiveGrads, n_strands: int, n_points: int):
    """Chain primitive gradients to polyline points (N, L, 3) and per-strand SH."""
    v = sg.vec
    n2 = np.einsum("ij,ij->i", v, v)
    c = 0.25 - sg.eps ** 2 / n2
    G = 0.5 * (pg.covs + np.transpose(pg.covs, (0, 2, 1)))
    Gv = np.einsum("nij,nj->ni", G, v)
    vGv = np.einsum("ni,ni->n", v, Gv)
    g_v = 2 * c[:, None] * Gv + (vGv * 2 * sg.eps ** 2 / n2 ** 2)[:, None] * v + pg.axes
    g_mu = pg.means
    g_pts = np.zeros((n_strands, n_points, 3))
    np.add.at(g_pts, (sg.strand, sg.segment), 0.5 * g_mu - g_v)
    np.add.at(g_pts, (sg.strand, sg.segment + 1), 0.5 * g_mu + g_v)
    g_sh = np.zeros((n_strands,) + sg.sh.shape[1:])
    np.add.at(g_sh, sg.strand, pg.sh)
    return g_pts, g_sh


def strand_screen_directions(points: np.ndarray, cam: Camera):
    """Signed screen angle (radians, (-pi, pi]) of every segment's direction,
    from the projection Jacobian at the segment midpoint.

    Returns (angles (N, L-1), culled (N, L-1)).
    """
    points = np.asarray(points, float)
    if points.ndim == 2:
        points = points[None]
    R, t = apply_camera_residual(cam)
    v = points[:, 1:] - points[:, :-1]
    mid = 0.5 * (points[:, 1:] + points[:, :-1])
    shape = v.shape[:2]
    xc = mid.reshape(-1, 3) @ R.T + t
    culled = xc[:, 2] <= cam.near
    xs = xc.copy()
    xs[culled, 2] = 1.0
    J = jacobian_from_camera_points(cam, xs)
    d2 = np.einsum("nij,nj->ni", J, v.reshape(-1, 3) @ R.T)
    ang = np.arctan2(d2[:, 1], d2[:, 0])
    return ang.reshape(shape), culled.reshape(shape)
