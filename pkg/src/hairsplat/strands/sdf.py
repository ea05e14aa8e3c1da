"""Triangle meshes, closest-point queries and pseudonormal signed distance."""

from __future__ import annotations

import itertools

from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from ..core import InvalidInput

# closest-feature codes
REGION_FACE = 0
REGION_V0, REGION_V1, REGION_V2 = 1, 2, 3
REGION_E01, REGION_E12, REGION_E20 = 4, 5, 6


@nb.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Closest point to ``p`` on triangle abc and the feature it lies on
    (Voronoi-region walk after Ericson, Real-Time Collision Detection 5.1.5)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a, REGION_V0
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b, REGION_V1
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab, REGION_E01
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c, REGION_V2
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac, REGION_E20
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), REGION_E12
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w, REGION_FACE


@nb.njit(cache=True)
def _closest_points(points, verts, faces, starts, cand):
    """Exact closest point over each point's candidate faces ``cand[starts[i]:starts[i+1]]``."""
    n = points.shape[0]
    out = np.empty((n, 3))
    face_of = np.empty(n, np.int64)
    region = np.empty(n, np.int64)
    dist = np.empty(n)
    for i in range(n):
        p = points[i]
        best = np.inf
        for j in range(starts[i], starts[i + 1]):
            f = cand[j]
            q, r = _closest_on_triangle(p, verts[faces[f, 0]], verts[faces[f, 1]], verts[faces[f, 2]])
            d = np.sqrt(((p - q) ** 2).sum())
            if d < best:
                best = d
                out[i] = q
                face_of[i] = f
                region[i] = r
        dist[i] = best
    return out, face_of, region, dist


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, float)
        self.faces = np.ascontiguousarray(self.faces, np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InvalidInput("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInput("face index out of range")

    # --- topology -------------------------------------------------------
    def _edges(self):
        if "edges" not in self._cache:
            f = self.faces
            e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])  # order: e01, e12, e20
            key = np.sort(e, axis=1)
            uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
            nf = len(f)
            face_edges = inv.reshape(3, nf).T  # (F, 3): e01, e12, e20
            self._cache["edges"] = (uniq, face_edges, counts)
        return self._cache["edges"]

    @property
    def closed(self) -> bool:
        """Every edge shared by exactly two faces."""
        _, _, counts = self._edges()
        return bool(len(counts) and np.all(counts == 2))

    def face_normals(self, unit: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def _pseudonormals(self):
        if "pn" not in self._cache:
            v, f = self.vertices, self.faces
            fn = self.face_normals()
            # angle-weighted vertex normals
            vn = np.zeros_like(v)
            for k in range(3):
                a = v[f[:, k]]
                b = v[f[:, (k + 1) % 3]]
                c = v[f[:, (k + 2) % 3]]
                e1 = b - a
                e2 = c - a
                cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(
                    np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300)
                ang = np.arccos(np.clip(cosang, -1, 1))
                np.add.at(vn, f[:, k], ang[:, None] * fn)
            # edge normals: sum of the adjacent face normals (each weighted by pi)
            uniq, face_edges, _ = self._edges()
            en = np.zeros((len(uniq), 3))
            for k in range(3):
                np.add.at(en, face_edges[:, k], fn)
            self._cache["pn"] = (fn, vn, en, face_edges)
        return self._cache["pn"]

    def _tree(self):
        if "tree" not in self._cache:
            tri = self.vertices[self.faces]
            cen = tri.mean(axis=1)
            rad = np.linalg.norm(tri - cen[:, None], axis=2).max()
            self._cache["tree"] = (cKDTree(cen), float(rad))
        return self._cache["tree"]

    # --- queries --------------------------------------------------------
    def closest_points(self, points):
        """Closest surface points, face index, feature region and distance."""
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, float)))
        if len(self.faces) == 0:
            raise InvalidInput("mesh has no faces")
        tree, r_max = self._tree()
        # the nearest centroid lies on its face, so no face whose centroid is
        # farther than d_c + r_max can be closer
        d_c, _ = tree.query(pts)
        lists = tree.query_ball_point(pts, d_c * (1 + 1e-12) + r_max + 1e-15)
        counts = np.fromiter((len(x) for x in lists), np.int64, len(lists))
        starts = np.zeros(len(pts) + 1, np.int64)
        np.cumsum(counts, out=starts[1:])
        cand = np.fromiter(itertools.chain.from_iterable(lists), np.int64, int(starts[-1]))
        return _closest_points(pts, self.vertices, self.faces, starts, cand)

    def edge_length_max(self) -> float:
        uniq, _, _ = self._edges()
        return float(np.linalg.norm(self.vertices[uniq[:, 0]] - self.vertices[uniq[:, 1]], axis=1).max())


@dataclass
class SignedDistance:
    values: np.ndarray
    closest: np.ndarray
    reliable: bool  # False for open meshes, where the sign is meaningless


def mesh_signed_distance(mesh: TriMesh, points) -> SignedDistance:
    """Distance to the nearest triangle, negative inside, signed with the
    angle-weighted pseudonormal of the closest feature."""
    pts = np.atleast_2d(np.asarray(points, float))
    q, face, region, dist = mesh.closest_points(pts)
    fn, vn, en, face_edges = mesh._pseudonormals()
    normal = fn[face].copy()
    f = mesh.faces[face]
    for code, k in ((REGION_V0, 0), (REGION_V1, 1), (REGION_V2, 2)):
        sel = region == code
        normal[sel] = vn[f[sel, k]]
    for code, k in ((REGION_E01, 0), (REGION_E12, 1), (REGION_E20, 2)):
        sel = region == code
        normal[sel] = en[face_edges[face[sel], k]]
    side = np.einsum("ij,ij->i", pts - q, normal)
    sign = np.where(side < 0, -1.0, 1.0)
    return SignedDistance(sign * dist, q, mesh.closed)


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed sphere mesh by repeated midpoint subdivision of an icosahedron."""
    t = (1 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        mid = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in mid:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                mid[key] = len(v) - 1
            return mid[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(v) * radius + np.asarray(center, float), np.array(faces))


def save_obj(path: str | Path, vertices, faces, uvs=None) -> None:
    """Wavefront OBJ; with ``uvs`` (one per vertex) faces are written as v/vt."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vertices]
    if uvs is not None:
        lines += [f"vt {u:.17g} {w:.17g}" for u, w in uvs]
        lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path):
    """Returns (vertices, faces, per-vertex uvs or None).  Texture indices
    must agree with vertex indices (one UV per vertex)."""
    verts, tex, faces = [], [], []
    uv_of = {}
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi = int(fields[0]) - 1
                if len(fields) > 1 and fields[1]:
                    ti = int(fields[1]) - 1
                    if uv_of.setdefault(vi, ti) != ti:
                        raise InvalidInput(f"{path}: vertex {vi + 1} has several texture coordinates")
                idx.append(vi)
            if len(idx) != 3:
                raise InvalidInput(f"{path}: only triangles are supported")
            faces.append(idx)
    verts = np.array(verts, float).reshape(-1, 3)
    faces = np.array(faces, np.int64).reshape(-1, 3)
    uvs = None
    if tex:
        if len(uv_of) != len(verts):
            raise InvalidInput(f"{path}: not every vertex has a texture coordinate")
        tex = np.array(tex, float)
        uvs = tex[[uv_of[i] for i in range(len(verts))]]
    return verts, faces, uvs
