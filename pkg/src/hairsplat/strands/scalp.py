"""Scalp surface: a UV-mapped triangle patch with smooth TBN frames.

A frame is stored as a 3x3 matrix whose rows are tangent (along dP/du),
bitangent and outward normal, so ``world = root + local @ frame``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..core import InvalidInput
from .sdf import TriMesh, load_obj, save_obj


def concentric_square_to_disk(uv: np.ndarray) -> np.ndarray:
    """Shirley-Chiu concentric map from [0,1]^2 onto the unit disk."""
    uv = np.asarray(uv, float)
    a = 2 * uv[..., 0] - 1
    b = 2 * uv[..., 1] - 1
    r = np.where(np.abs(a) > np.abs(b), a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(np.abs(a) > np.abs(b), np.pi / 4 * b / a, np.pi / 2 - np.pi / 4 * a / b)
    phi = np.where((a == 0) & (b == 0), 0.0, phi)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def _orthonormal_frame(tangent: np.ndarray, normal: np.ndarray) -> np.ndarray:
    n = normal / np.linalg.norm(normal, axis=-1, keepdims=True)
    t = tangent - np.sum(tangent * n, axis=-1, keepdims=True) * n
    tn = np.linalg.norm(t, axis=-1, keepdims=True)
    # fall back to any perpendicular when dP/du is parallel to the normal
    alt = np.cross(n, np.where(np.abs(n[..., :1]) < 0.9, [1.0, 0, 0], [0, 1.0, 0]))
    t = np.where(tn > 1e-12, t / np.maximum(tn, 1e-300), alt / np.linalg.norm(alt, axis=-1, keepdims=True))
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=-2)


@dataclass
class ScalpSurface:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    uvs: np.ndarray  # (V, 2) in [0, 1]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float)
        self.faces = np.asarray(self.faces, np.int64)
        self.uvs = np.asarray(self.uvs, float)
        if self.uvs.shape != (len(self.vertices), 2):
            raise InvalidInput("scalp needs one UV per vertex")
        self.mesh = TriMesh(self.vertices, self.faces)
        self._vertex_frames()

    # --- frames ---------------------------------------------------------
    def _vertex_frames(self) -> None:
        v, f, uv = self.vertices, self.faces, self.uvs
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        d1 = uv[f[:, 1]] - uv[f[:, 0]]
        d2 = uv[f[:, 2]] - uv[f[:, 0]]
        det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
        if np.any(np.abs(det) < 1e-14):
            raise InvalidInput("scalp has a face with degenerate UVs")
        dpdu = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / det[:, None]
        fn = np.cross(e1, e2)  # area weighted
        vn = np.zeros_like(v)
        vt = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, f[:, k], fn)
            np.add.at(vt, f[:, k], dpdu * np.linalg.norm(fn, axis=1, keepdims=True))
        self.vertex_normals = vn / np.linalg.norm(vn, axis=1, keepdims=True)
        self.vertex_tangents = vt

    def frames_at(self, face: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Barycentrically blended vertex TBN, re-orthonormalized. (N, 3, 3)"""
        f = self.faces[face]
        n = np.einsum("nk,nkj->nj", bary, self.vertex_normals[f])
        t = np.einsum("nk,nkj->nj", bary, self.vertex_tangents[f])
        return _orthonormal_frame(t, n)

    def points_at(self, face: np.ndarray, bary: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nkj->nj", bary, self.vertices[self.faces[face]])

    # --- UV lookup ------------------------------------------------------
    def _uv_tree(self):
        if "tree" not in self._cache:
            cen = self.uvs[self.faces].mean(axis=1)
            self._cache["tree"] = cKDTree(cen)
        return self._cache["tree"]

    def _bary_uv(self, faces: np.ndarray, q: np.ndarray) -> np.ndarray:
        t = self.uvs[self.faces[faces]]  # (..., 3, 2)
        a, b, c = t[..., 0, :], t[..., 1, :], t[..., 2, :]
        v0, v1, v2 = b - a, c - a, q - a
        den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
        l1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
        l2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
        return np.stack([1 - l1 - l2, l1, l2], axis=-1)

    def locate(self, uv) -> tuple[np.ndarray, np.ndarray]:
        """Face index and barycentric coordinates of texture coordinates.

        Points outside the UV domain snap to the nearest candidate face with
        clipped, renormalized barycentrics.
        """
        q = np.atleast_2d(np.asarray(uv, float))
        if q.size and (not np.isfinite(q).all()):
            raise InvalidInput("non-finite texture coordinate")
        tree = self._uv_tree()
        k = min(12, len(self.faces))
        _, cand = tree.query(q, k=k)
        cand = cand.reshape(len(q), k)
        bary = self._bary_uv(cand, q[:, None, :])
        inside = (bary >= -1e-12).all(axis=-1)
        # prefer the first containing candidate, else the least violating one
        score = np.where(inside, 0.0, -np.minimum(bary.min(axis=-1), 0.0))
        pick = np.argmin(score + (~inside) * 1.0, axis=1)
        face = cand[np.arange(len(q)), pick]
        b = bary[np.arange(len(q)), pick]
        bad = ~inside[np.arange(len(q)), pick]
        if np.any(bad):
            # exhaustive search for the stragglers
            for i in np.flatnonzero(bad):
                all_b = self._bary_uv(np.arange(len(self.faces)), q[i][None, :])
                ok = np.flatnonzero((all_b >= -1e-12).all(axis=-1))
                if len(ok):
                    face[i] = ok[0]
                    b[i] = all_b[ok[0]]
                else:
                    bb = np.clip(b[i], 0, None)
                    b[i] = bb / bb.sum()
        return face, b

    def sample(self, uv):
        """Root points and frames at texture coordinates."""
        face, bary = self.locate(uv)
        return self.points_at(face, bary), self.frames_at(face, bary)

    # --- 3D queries -----------------------------------------------------
    def project(self, points) -> np.ndarray:
        """Closest points on the scalp surface."""
        return self.mesh.closest_points(points)[0]

    def project_frames(self, points):
        """Closest scalp points with their blended frames and texture coordinates."""
        q, face, _, _ = self.mesh.closest_points(points)
        tri = self.vertices[self.faces[face]]
        e0, e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], q - tri[:, 0]
        d00 = np.einsum("ij,ij->i", e0, e0)
        d01 = np.einsum("ij,ij->i", e0, e1)
        d11 = np.einsum("ij,ij->i", e1, e1)
        d20 = np.einsum("ij,ij->i", e2, e0)
        d21 = np.einsum("ij,ij->i", e2, e1)
        den = d00 * d11 - d01 * d01
        b1 = (d11 * d20 - d01 * d21) / den
        b2 = (d00 * d21 - d01 * d20) / den
        bary = np.clip(np.stack([1 - b1 - b2, b1, b2], axis=1), 0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        uv = np.einsum("nk,nkj->nj", bary, self.uvs[self.faces[face]])
        return q, self.frames_at(face, bary), uv

    def distance(self, points) -> np.ndarray:
        return self.mesh.closest_points(points)[3]

    def nearest_vertex(self, points) -> np.ndarray:
        if "vtree" not in self._cache:
            self._cache["vtree"] = cKDTree(self.vertices)
        return self._cache["vtree"].query(np.atleast_2d(points))[1]

    # --- io -------------------------------------------------------------
    def save_obj(self, path: str | Path) -> None:
        save_obj(path, self.vertices, self.faces, self.uvs)

    @staticmethod
    def load_obj(path: str | Path) -> "ScalpSurface":
        v, f, uv = load_obj(path)
        if uv is None:
            raise InvalidInput(f"{path}: scalp mesh has no texture coordinates")
        return ScalpSurface(v, f, uv)


def sphere_cap_scalp(radius: float = 0.09, center=(0.0, 0.0, 0.0), axis=(0.0, 1.0, 0.0),
                     cap_angle: float = np.radians(80.0), resolution: int = 33,
                     front=(0.0, 0.0, 1.0)) -> ScalpSurface:
    """Cap of a sphere around ``axis`` with polar angle up to ``cap_angle``.

    UVs come from a regular grid pushed through the concentric square-to-disk
    map, so u runs towards ``front`` at the cap's rim.  Vertices lie on the
    sphere; triangles are wound outward.
    """
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    front = np.asarray(front, float)
    e1 = front - axis * (front @ axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    g = np.linspace(0.0, 1.0, resolution)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    disk = concentric_square_to_disk(uv)
    rho = np.linalg.norm(disk, axis=1)
    psi = np.arctan2(disk[:, 1], disk[:, 0])
    theta = rho * cap_angle
    local = np.stack([np.sin(theta) * np.cos(psi), np.sin(theta) * np.sin(psi), np.cos(theta)], axis=1)
    verts = np.asarray(center, float) + radius * (local[:, :1] * e1 + local[:, 1:2] * e2 + local[:, 2:3] * axis)
    faces = []
    n = resolution
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            # split along the diagonal that stays off the disk's diagonal seams
            if (i < (n - 1) / 2) == (j < (n - 1) / 2):
                faces += [(a, b, c), (a, c, d)]
            else:
                faces += [(a, b, d), (b, c, d)]
    faces = np.array(faces, np.int64)
    v = verts
    nrm = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    out = v[faces].mean(axis=1) - np.asarray(center, float)
    flip = np.einsum("ij,ij->i", nrm, out) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return ScalpSurface(verts, faces, uv)
