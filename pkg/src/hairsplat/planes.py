"""Float32 image planes on disk: raw little-endian ``.f32`` files plus a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PLANES_FORMAT = "hairsplat-planes"
PLANES_VERSION = 1


class FormatError(ValueError):
    pass


def write_planes(directory: str | Path, stem: str, planes: dict[str, np.ndarray], kind: str = "",
                 extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {p.shape for p in planes.values()}
    if len(shapes) != 1:
        raise FormatError(f"planes of {stem} have different shapes: {sorted(shapes)}")
    h, w = shapes.pop()
    meta = {
        "format": PLANES_FORMAT,
        "version": PLANES_VERSION,
        "kind": kind,
        "width": w,
        "height": h,
        "dtype": "float32",
        "byteorder": "little",
        "channels": [],
    }
    if extra:
        meta.update(extra)
    for name, plane in planes.items():
        fn = f"{stem}_{name}.f32"
        np.ascontiguousarray(plane, dtype="<f4").tofile(directory / fn)
        meta["channels"].append({"name": name, "file": fn})
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(meta, indent=2))
    return path


def read_planes(directory: str | Path, stem: str, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    path = directory / f"{stem}.json"
    if not path.exists():
        raise FormatError(f"missing plane sidecar {path}")
    meta = json.loads(path.read_text())
    if meta.get("format") != PLANES_FORMAT:
        raise FormatError(f"{path}: not a plane sidecar")
    if meta.get("version") != PLANES_VERSION:
        raise FormatError(f"{path}: unsupported version {meta.get('version')} (expected {PLANES_VERSION})")
    if kind is not None and meta.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {meta.get('kind')!r}")
    h, w = int(meta["height"]), int(meta["width"])
    out = {}
    for ch in meta["channels"]:
        f = directory / ch["file"]
        if not f.exists():
            raise FormatError(f"{path}: missing channel file {f.name}")
        data = np.fromfile(f, dtype="<f4")
        if data.size != h * w:
            raise FormatError(f"{f}: expected {h * w} values, found {data.size}")
        out[ch["name"]] = data.reshape(h, w).astype(np.float64)
    return out, meta


def to_u8(a: np.ndarray) -> np.ndarray:
    return (np.clip(a, 0, 1) * 255 + 0.5).astype(np.uint8)


def save_png(path: str | Path, a: np.ndarray) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_u8(a)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0
