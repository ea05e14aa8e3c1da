"""Cleanup of fitted strands against the head mesh.

Points inside the head are cut away, short leftovers dropped, and each
remaining piece is rooted on the nearest scalp vertex and resampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scalp import ScalpSurface
from .sdf import TriMesh, mesh_signed_distance

ROOT_TOL = 1e-5
PUSH_OUT = 1e-6


def resample_polyline(poly: np.ndarray, n: int) -> np.ndarray | None:
    """``n`` points evenly spaced by arc length; None for zero-length input."""
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return None
    target = np.linspace(0.0, s[-1], n)
    out = np.stack([np.interp(target, s, poly[:, k]) for k in range(3)], axis=1)
    out[0] = poly[0]
    out[-1] = poly[-1]
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of True."""
    runs = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


@dataclass
class PostprocessResult:
    strands: np.ndarray  # (N', L, 3)
    source: np.ndarray  # (N',) index of the input strand each output came from
    stats: dict = field(default_factory=dict)


def postprocess_prune_reattach(strands: np.ndarray, head: TriMesh, scalp: ScalpSurface, min_run: int = 3,
                               root_tol: float = ROOT_TOL) -> PostprocessResult:
    strands = np.asarray(strands, float)
    n, L, _ = strands.shape
    if n == 0:
        return PostprocessResult(np.zeros((0, L, 3)), np.zeros(0, np.int64), {"input": 0, "output": 0})
    sdf = mesh_signed_distance(head, strands.reshape(-1, 3)).values.reshape(n, L)
    root_dist = scalp.distance(strands[:, 0])
    out, src = [], []
    stats = {"input": n, "unchanged": 0, "removed": 0, "pruned_points": int((sdf < 0).sum()),
             "reattached": 0, "short_runs": 0, "pushed_out": 0}
    for i in range(n):
        keep = sdf[i] >= 0
        if keep.all() and root_dist[i] < root_tol:
            out.append(strands[i])
            src.append(i)
            stats["unchanged"] += 1
            continue
        produced = False
        for a, b in _runs(keep):
            if b - a < min_run:
                stats["short_runs"] += 1
                continue
            piece = strands[i, a:b]
            if not (a == 0 and root_dist[i] < root_tol):
                root = scalp.vertices[scalp.nearest_vertex(piece[0])[0]]
                if np.linalg.norm(root - piece[0]) > 0:
                    piece = np.concatenate([root[None], piece])
                stats["reattached"] += 1
            res = resample_polyline(piece, L)
            if res is None:
                continue
            out.append(res)
            src.append(i)
            produced = True
        if not produced:
            stats["removed"] += 1
    if not out:
        result = np.zeros((0, L, 3))
    else:
        result = np.stack(out)
        # resampling and reconnecting can cut chords through the head; push
        # such points just outside (roots stay where they are)
        for _ in range(3):
            body = result[:, 1:].reshape(-1, 3)
            sd = mesh_signed_distance(head, body)
            inside = sd.values < 0
            if not inside.any():
                break
            stats["pushed_out"] += int(inside.sum())
            d = body[inside] - sd.closest[inside]
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
            body[inside] = sd.closest[inside] - PUSH_OUT * d
            result[:, 1:] = body.reshape(len(result), L - 1, 3)
    stats["output"] = len(result)
    return PostprocessResult(result, np.array(src, np.int64), stats)
