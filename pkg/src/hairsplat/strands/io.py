"""Strand files: the binary HAIR format (Cem Yuksel's layout) and PLY polylines.

HAIR layout, little endian:
    0   char[4]  "HAIR"
    4   uint32   number of strands
    8   uint32   total number of points
    12  uint32   bit flags (1 segments, 2 points, 4 thickness, 8 transparency, 16 color)
    16  uint32   default segment count per strand
    20  float32  default thickness
    24  float32  default transparency
    28  float32  default color (3)
    40  char[88] info text
    128          uint16 segments per strand (if flag 1), then float32 xyz points
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..core import InvalidInput

HAIR_MAGIC = b"HAIR"
_HEADER = struct.Struct("<4sIIIIff3f88s")
FLAG_SEGMENTS, FLAG_POINTS, FLAG_THICKNESS, FLAG_TRANSPARENCY, FLAG_COLOR = 1, 2, 4, 8, 16


def save_hair(path: str | Path, strands, info: str = "hairsplat") -> None:
    """Write a list/array of (L_i, 3) polylines."""
    strands = [np.asarray(s, np.float32).reshape(-1, 3) for s in strands]
    for s in strands:
        if len(s) < 2 or len(s) > 65536:
            raise InvalidInput("HAIR strands need 2..65536 points")
    counts = np.array([len(s) for s in strands], np.int64)
    uniform = len(counts) > 0 and np.all(counts == counts[0])
    flags = FLAG_POINTS | (0 if uniform else FLAG_SEGMENTS)
    default_seg = int(counts[0] - 1) if uniform else 0
    header = _HEADER.pack(HAIR_MAGIC, len(strands), int(counts.sum()), flags, default_seg,
                          1.0, 0.0, 1.0, 1.0, 1.0, info.encode()[:87].ljust(88, b"\0"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        if not uniform:
            fh.write((counts - 1).astype("<u2").tobytes())
        for s in strands:
            fh.write(s.astype("<f4").tobytes())


def load_hair(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInput(f"{path}: truncated HAIR header")
    magic, n_strands, n_points, flags, default_seg, *_ = _HEADER.unpack_from(data)
    if magic != HAIR_MAGIC:
        raise InvalidInput(f"{path}: not a HAIR file")
    if not flags & FLAG_POINTS:
        raise InvalidInput(f"{path}: HAIR file without point data")
    off = _HEADER.size
    if flags & FLAG_SEGMENTS:
        segs = np.frombuffer(data, "<u2", n_strands, off).astype(np.int64)
        off += 2 * n_strands
    else:
        segs = np.full(n_strands, default_seg, np.int64)
    if int((segs + 1).sum()) != n_points:
        raise InvalidInput(f"{path}: point count {n_points} disagrees with segment counts")
    pts = np.frombuffer(data, "<f4", 3 * n_points, off).reshape(-1, 3).astype(np.float64)
    out, k = [], 0
    for s in segs:
        out.append(pts[k:k + s + 1])
        k += s + 1
    return out


def save_strands_ply(path: str | Path, strands) -> None:
    """ASCII PLY with vertices and one edge per polyline segment."""
    strands = [np.asarray(s, float).reshape(-1, 3) for s in strands]
    verts = np.concatenate(strands) if strands else np.zeros((0, 3))
    edges, base = [], 0
    for s in strands:
        idx = np.arange(base, base + len(s))
        edges.append(np.stack([idx[:-1], idx[1:]], axis=1))
        base += len(s)
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(verts)}",
             "property float x", "property float y", "property float z",
             f"element edge {len(edges)}", "property int vertex1", "property int vertex2", "end_header"]
    lines += [f"{x:.7g} {y:.7g} {z:.7g}" for x, y, z in verts]
    lines += [f"{a} {b}" for a, b in edges]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
