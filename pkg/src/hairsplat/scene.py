"""Synthetic hair scenes (the verification oracle) and scene bundles on disk.

A scene is a sphere head with a spherical-cap scalp and procedural strands
grown from it, seen by a ring of cameras.  Images are line renders with
2 px strokes (supersampled), masks are coverage fractions and the oracle
orientation maps come from 1 px z-buffered line renders with the head
occluding.

Presets (all lengths in meters):

============  =========  ===========  ==========  =========
style         amplitude  cycles       helical     length
============  =========  ===========  ==========  =========
straight      0          0            no          0.11-0.16
wavy          0.006      2.5          no          0.11-0.16
curly         0.005      6            yes         0.09-0.13
============  =========  ===========  ==========  =========
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, InvalidInput, look_at, so3_exp
from .orientation import OrientationMap, oracle_orientation_map, rasterize_lines, segment_arrays
from .planes import load_png, save_png
from .strands.io import load_hair, save_hair, save_strands_ply
from .strands.scalp import ScalpSurface, sphere_cap_scalp
from .strands.sdf import TriMesh, icosphere, load_obj, save_obj

BUNDLE_FORMAT = "hairsplat-scene"
BUNDLE_VERSION = 1


class SceneError(ValueError):
    pass


@dataclass
class StyleConfig:
    name: str = "wavy"
    amplitude: float = 0.006
    cycles: float = 2.5
    helical: bool = False
    length_min: float = 0.11
    length_max: float = 0.16
    bend_length: float = 0.03  # how fast strands turn from the normal to gravity
    margin: float = 0.003  # strands keep this far off the head

    @staticmethod
    def preset(name: str) -> "StyleConfig":
        if name == "straight":
            return StyleConfig("straight", 0.0, 0.0, False)
        if name == "wavy":
            return StyleConfig("wavy", 0.006, 2.5, False)
        if name == "curly":
            return StyleConfig("curly", 0.005, 6.0, True, 0.09, 0.13)
        raise InvalidInput(f"unknown style preset {name!r}")


@dataclass
class SynthConfig:
    style: StyleConfig = field(default_factory=StyleConfig)
    n_strands: int = 300
    n_points: int = 64  # points per GT strand
    n_train: int = 32
    n_test: int = 8
    width: int = 128
    height: int = 128
    head_radius: float = 0.09
    cam_distance: float = 0.55
    focal: float = 200.0
    elevation_min: float = -10.0  # degrees
    elevation_max: float = 30.0
    supersample: int = 3
    stroke_px: float = 2.0
    perturb_rot_deg: float = 1.0
    perturb_trans_frac: float = 0.01
    n_init_points: int = 4000
    init_noise: float = 0.002

    @property
    def n_views(self) -> int:
        return self.n_train + self.n_test


@dataclass
class SceneBundle:
    cameras: list  # initial estimates handed to the pipeline
    images: np.ndarray  # (V, H, W, 3)
    hair_masks: np.ndarray  # (V, H, W)
    body_masks: np.ndarray
    train: np.ndarray  # view indices
    test: np.ndarray
    extent: float
    gt_cameras: list | None = None
    oracle_maps: list | None = None  # OrientationMap per view
    gt_strands: np.ndarray | None = None  # (N, L, 3)
    scalp: ScalpSurface | None = None
    head_mesh: TriMesh | None = None
    head: dict | None = None  # {"center": [...], "radius": r}
    init_points: np.ndarray | None = None
    init_colors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def validate(self) -> None:
        v = len(self.cameras)
        if len(self.images) != v:
            raise SceneError(f"{v} cameras but {len(self.images)} images")
        h, w = self.images.shape[1:3]
        for name, arr in (("hair mask", self.hair_masks), ("body mask", self.body_masks)):
            if len(arr) != v:
                raise SceneError(f"{v} cameras but {len(arr)} {name}s")
            for i, m in enumerate(arr):
                if m.shape != (h, w):
                    raise SceneError(f"view {i}: {name} is {m.shape}, expected {(h, w)}")
        for i, cam in enumerate(self.cameras):
            if (cam.height, cam.width) != (h, w):
                raise SceneError(f"view {i}: camera is {cam.width}x{cam.height}, images are {w}x{h}")
        if self.oracle_maps is not None:
            for i, om in enumerate(self.oracle_maps):
                if om.shape != (h, w):
                    raise SceneError(f"view {i}: oracle map is {om.shape}, expected {(h, w)}")


# ---------------------------------------------------------------------------
# generation


def _stratified_uv(n: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered-grid samples of the unit square, cells visited in a shuffled order."""
    g = int(np.ceil(np.sqrt(n)))
    cells = rng.permutation(g * g)[:n]
    ij = np.stack([cells // g, cells % g], axis=1).astype(float)
    return (ij + rng.uniform(0.1, 0.9, (n, 2))) / g


def _push_out(p: np.ndarray, center: np.ndarray, r: float) -> np.ndarray:
    d = p - center
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    return np.where(n < r, center + d * (r / np.maximum(n, 1e-12)), p)


def grow_strands(roots: np.ndarray, frames: np.ndarray, style: StyleConfig, n_points: int,
                 rng: np.random.Generator, head_center, head_radius: float) -> np.ndarray:
    """Strands that leave along the normal, bend towards gravity, keep off the
    head sphere and carry a planar or helical wave."""
    n = len(roots)
    center = np.asarray(head_center, float)
    lengths = rng.uniform(style.length_min, style.length_max, n)
    gravity = np.array([0.0, -1.0, 0.0])
    s = np.linspace(0.0, 1.0, n_points)
    out = np.empty((n, n_points, 3))
    phase = rng.uniform(0, 2 * np.pi, n)
    for k in range(n):
        ds = lengths[k] / (n_points - 1)
        p = roots[k].copy()
        pts = [p.copy()]
        normal = frames[k, 2]
        for i in range(1, n_points):
            w = 1.0 - np.exp(-(i - 1) * ds / style.bend_length)
            d = (1 - w) * normal + w * gravity
            d /= np.linalg.norm(d)
            p = p + ds * d
            p = _push_out(p, center, head_radius + style.margin * min(1.0, i * ds / 0.01))
            pts.append(p.copy())
        c = np.array(pts)
        if style.amplitude > 0:
            tang = np.gradient(c, axis=0)
            tang /= np.linalg.norm(tang, axis=1, keepdims=True)
            e1 = frames[k, 0] - tang * (tang @ frames[k, 0])[:, None]
            e1 /= np.maximum(np.linalg.norm(e1, axis=1, keepdims=True), 1e-12)
            e2 = np.cross(tang, e1)
            ramp = np.minimum(1.0, s / 0.2)
            arg = 2 * np.pi * style.cycles * s + phase[k]
            off = style.amplitude * ramp[:, None] * (np.sin(arg)[:, None] * e1)
            if style.helical:
                off += style.amplitude * ramp[:, None] * (np.cos(arg)[:, None] * e2)
            c = c + off
            c[0] = roots[k]
            c[1:] = _push_out(c[1:], center, head_radius + 0.5 * style.margin)
        out[k] = c
    return out


def camera_ring(cfg: SynthConfig, rng: np.random.Generator, target=(0.0, -0.04, 0.0)):
    """Train and held-out cameras interleaved on a ring with elevation jitter."""
    v = cfg.n_views
    az = np.linspace(0, 2 * np.pi, v, endpoint=False)
    el = np.radians(rng.uniform(cfg.elevation_min, cfg.elevation_max, v))
    target = np.asarray(target, float)
    cams = []
    for a, e in zip(az, el):
        eye = target + cfg.cam_distance * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
        R, t = look_at(eye, target)
        cams.append(Camera(cfg.focal, cfg.focal, (cfg.width - 1) / 2, (cfg.height - 1) / 2,
                           cfg.width, cfg.height, R=R, t=t))
    if cfg.n_test:
        test = np.round(np.linspace(0, v, cfg.n_test, endpoint=False) + v / cfg.n_test / 2).astype(int) % v
        test = np.unique(test)
    else:
        test = np.zeros(0, int)
    train = np.setdiff1d(np.arange(v), test)
    return cams, train, test


def camera_extent(cams) -> float:
    centers = np.array([c.center for c in cams])
    return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())


def perturb_camera(cam: Camera, rot_deg: float, trans: float, rng: np.random.Generator) -> Camera:
    """Left-compose a random rotation of ``rot_deg`` degrees and a random
    translation of length ``trans`` onto the pose."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dR = so3_exp(np.radians(rot_deg) * axis)
    dirn = rng.normal(size=3)
    dirn /= np.linalg.norm(dirn)
    return Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                  R=dR @ cam.R, t=dR @ cam.t + trans * dirn, near=cam.near)


def sphere_depth(cam: Camera, center, radius: float):
    """Per-pixel camera depth of the first sphere hit (inf on a miss) and the
    world-space surface normal there."""
    R, t = cam.R, cam.t
    C = -R.T @ t
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ R  # rows: R^T d
    oc = C - np.asarray(center, float)
    a = np.einsum("hwi,hwi->hw", d, d)
    b = 2 * (d @ oc)
    c = oc @ oc - radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        s = (-b - np.sqrt(disc)) / (2 * a)
    hit = (disc >= 0) & (s > cam.near)
    depth = np.where(hit, s, np.inf)
    pts = C + np.where(hit, s, 0.0)[..., None] * d
    nrm = (pts - center) / radius
    return depth, np.where(hit[..., None], nrm, 0.0)


LIGHT = np.array([0.3, 0.8, 0.6]) / np.linalg.norm([0.3, 0.8, 0.6])
SKIN = np.array([0.82, 0.62, 0.50])


def shade_segments(strands: np.ndarray, albedo: np.ndarray, cam: Camera) -> np.ndarray:
    """Kajiya-Kay style per-segment color: brightness follows the tangent,
    so orientation shows up in the image."""
    t = strands[:, 1:] - strands[:, :-1]
    t = t / np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    mid = 0.5 * (strands[:, 1:] + strands[:, :-1])
    eye = cam.center - mid
    eye /= np.linalg.norm(eye, axis=-1, keepdims=True)
    tl = t @ LIGHT
    te = np.einsum("nsi,nsi->ns", t, eye)
    sin_l = np.sqrt(np.clip(1 - tl * tl, 0, 1))
    sin_e = np.sqrt(np.clip(1 - te * te, 0, 1))
    spec = np.clip(tl * te + sin_l * sin_e, 0, 1) ** 30
    col = albedo[:, None, :] * (0.25 + 0.75 * sin_l)[..., None] + 0.25 * spec[..., None]
    return np.clip(col, 0, 1).reshape(-1, 3)


def render_view(cam: Camera, strands: np.ndarray, albedo: np.ndarray, head_center, head_radius: float,
                supersample: int = 3, stroke_px: float = 2.0):
    """Color image, hair coverage and body coverage for one view."""
    S = supersample
    hi = Camera(cam.fx * S, cam.fy * S, (cam.cx + 0.5) * S - 0.5, (cam.cy + 0.5) * S - 0.5,
                cam.width * S, cam.height * S, R=cam.R, t=cam.t, omega=cam.omega, dt=cam.dt, near=cam.near)
    depth, nrm = sphere_depth(hi, head_center, head_radius)
    head = np.isfinite(depth)
    lam = np.clip(nrm @ LIGHT, 0, 1)
    img = np.where(head[..., None], SKIN * (0.3 + 0.7 * lam[..., None]), 0.0)
    p0, p1, z0, z1, _ = segment_arrays(strands, hi)
    cols = shade_segments(strands, albedo, hi)
    out, _, ids = rasterize_lines(p0, p1, z0, z1, cols, hi.width, hi.height, stroke_px * S, zbuf=depth)
    hair = ids >= 0
    img = np.where(hair[..., None], out, img)
    body = hair | head

    def down(a):
        a = a.astype(float)
        sh = (cam.height, S, cam.width, S) + a.shape[2:]
        return a.reshape(sh).mean(axis=(1, 3))

    return down(img), down(hair), down(body)


def _quantize8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0, 1) * 255) / 255


def generate_synthetic_scene(cfg: SynthConfig | None = None, seed: int = 0) -> SceneBundle:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    center = np.zeros(3)
    R_head = cfg.head_radius
    tilt = np.radians(20.0)
    scalp = sphere_cap_scalp(R_head, center, axis=(0.0, np.cos(tilt), -np.sin(tilt)), front=(0.0, 0.0, 1.0))
    # slightly inset so scalp triangles (chords of the sphere) stay outside
    head_mesh = icosphere(R_head * (1 - 2e-3), 4, center)
    uv = _stratified_uv(cfg.n_strands, rng)
    roots, frames = scalp.sample(uv)
    strands = grow_strands(roots, frames, cfg.style, cfg.n_points, rng, center, R_head)
    strands = strands.astype(np.float32).astype(np.float64)
    base = np.array([0.45, 0.30, 0.17])
    albedo = np.clip(base * rng.uniform(0.8, 1.2, (cfg.n_strands, 1)) + rng.normal(0, 0.02, (cfg.n_strands, 3)), 0, 1)
    cams, train, test = camera_ring(cfg, rng)
    images, hair, body, maps = [], [], [], []
    for cam in cams:
        img, hm, bm = render_view(cam, strands, albedo, center, R_head, cfg.supersample, cfg.stroke_px)
        images.append(_quantize8(img))
        hair.append(_quantize8(hm))
        body.append(_quantize8(bm))
        depth, _ = sphere_depth(cam, center, R_head)
        om = oracle_orientation_map(strands, cam, 1, zbuf=depth)
        maps.append(OrientationMap(om.angle.astype(np.float32).astype(float), om.confidence, om.valid))
    extent = camera_extent(cams)
    init_cams = list(cams)
    for i in train:
        init_cams[i] = perturb_camera(cams[i], cfg.perturb_rot_deg * rng.uniform(0.5, 1.0),
                                      cfg.perturb_trans_frac * extent * rng.uniform(0.5, 1.0), rng)
    pts, cols = _init_point_cloud(strands, albedo, center, R_head, cfg, rng)
    meta = {"seed": seed, "style": asdict(cfg.style), "config": {k: v for k, v in asdict(cfg).items() if k != "style"}}
    return SceneBundle(
        cameras=init_cams, images=np.array(images), hair_masks=np.array(hair), body_masks=np.array(body),
        train=np.asarray(train), test=np.asarray(test), extent=extent, gt_cameras=cams, oracle_maps=maps,
        gt_strands=strands, scalp=scalp, head_mesh=head_mesh, head={"center": center.tolist(), "radius": R_head},
        init_points=pts, init_colors=cols, meta=meta,
    )


def _init_point_cloud(strands, albedo, center, radius, cfg: SynthConfig, rng):
    """Stand-in for a structure-from-motion cloud: noisy samples on the hair
    and on the visible (front and upper) head surface."""
    n_hair = cfg.n_init_points * 3 // 4
    n_head = cfg.n_init_points - n_hair
    k = rng.integers(0, strands.shape[0], n_hair)
    j = rng.integers(0, strands.shape[1], n_hair)
    hp = strands[k, j] + rng.normal(0, cfg.init_noise, (n_hair, 3))
    hc = albedo[k]
    d = rng.normal(size=(n_head, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sp = center + radius * d + rng.normal(0, cfg.init_noise, (n_head, 3))
    sc = np.tile(SKIN * 0.7, (n_head, 1))
    pts = np.concatenate([hp, sp]).astype(np.float32).astype(float)
    cols = np.clip(np.concatenate([hc, sc]), 0, 1).astype(np.float32).astype(float)
    return pts, cols


# ---------------------------------------------------------------------------
# bundle io


def save_scene(bundle: SceneBundle, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = bundle.size
    doc = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "n_views": bundle.n_views,
        "width": w,
        "height": h,
        "train": [int(i) for i in bundle.train],
        "test": [int(i) for i in bundle.test],
        "extent": bundle.extent,
        "cameras": [c.to_dict() for c in bundle.cameras],
        "gt_cameras": None if bundle.gt_cameras is None else [c.to_dict() for c in bundle.gt_cameras],
        "head": bundle.head,
        "meta": bundle.meta,
        "files": {},
    }
    for i in range(bundle.n_views):
        save_png(d / "images" / f"view_{i:03d}.png", bundle.images[i])
        save_png(d / "masks" / f"hair_{i:03d}.png", bundle.hair_masks[i])
        save_png(d / "masks" / f"body_{i:03d}.png", bundle.body_masks[i])
        if bundle.oracle_maps is not None:
            bundle.oracle_maps[i].save(d / "oracle", f"view_{i:03d}")
    if bundle.gt_strands is not None:
        save_hair(d / "gt_strands.hair", bundle.gt_strands)
        save_strands_ply(d / "gt_strands.ply", bundle.gt_strands)
        doc["files"]["gt_strands"] = "gt_strands.hair"
    if bundle.scalp is not None:
        bundle.scalp.save_obj(d / "scalp.obj")
        doc["files"]["scalp"] = "scalp.obj"
    if bundle.head_mesh is not None:
        save_obj(d / "head.obj", bundle.head_mesh.vertices, bundle.head_mesh.faces)
        doc["files"]["head_mesh"] = "head.obj"
    if bundle.init_points is not None:
        np.savetxt(d / "points.txt", np.concatenate([bundle.init_points, bundle.init_colors], axis=1),
                   fmt="%.9g", header="x y z r g b")
        doc["files"]["init_points"] = "points.txt"
    (d / "scene.json").write_text(json.dumps(doc, indent=2))


def load_scene(directory: str | Path) -> SceneBundle:
    d = Path(directory)
    path = d / "scene.json"
    if not path.exists():
        raise SceneError(f"{d}: no scene.json")
    doc = json.loads(path.read_text())
    if doc.get("format") != BUNDLE_FORMAT:
        raise SceneError(f"{path}: not a scene bundle")
    if doc.get("version") != BUNDLE_VERSION:
        raise SceneError(f"{path}: unsupported bundle version {doc.get('version')}")
    n = int(doc["n_views"])
    cams = [Camera.from_dict(c) for c in doc["cameras"]]
    if len(cams) != n:
        raise SceneError(f"{path}: n_views={n} but {len(cams)} cameras")

    def read(sub, name, i):
        f = d / sub / f"{name}_{i:03d}.png"
        if not f.exists():
            raise SceneError(f"view {i}: missing {f.relative_to(d)}")
        return load_png(f)

    images = []
    for i in range(n):
        img = read("images", "view", i)
        if img.ndim != 3 or img.shape[2] < 3:
            raise SceneError(f"view {i}: image is not RGB")
        if img.shape[:2] != (doc["height"], doc["width"]):
            raise SceneError(f"view {i}: image is {img.shape[1]}x{img.shape[0]}, "
                             f"expected {doc['width']}x{doc['height']}")
        images.append(img[..., :3])
    hair = [read("masks", "hair", i) for i in range(n)]
    body = [read("masks", "body", i) for i in range(n)]
    for i in range(n):
        for name, m in (("hair mask", hair[i]), ("body mask", body[i])):
            if m.shape != (doc["height"], doc["width"]):
                raise SceneError(f"view {i}: {name} is {m.shape[1]}x{m.shape[0]}, "
                                 f"expected {doc['width']}x{doc['height']}")
    oracle = None
    if (d / "oracle").exists():
        oracle = [OrientationMap.load(d / "oracle", f"view_{i:03d}") for i in range(n)]
    files = doc.get("files", {})
    gt = None
    if "gt_strands" in files:
        gt = np.array(load_hair(d / files["gt_strands"]))
    scalp = ScalpSurface.load_obj(d / files["scalp"]) if "scalp" in files else None
    head_mesh = None
    if "head_mesh" in files:
        v, f, _ = load_obj(d / files["head_mesh"])
        head_mesh = TriMesh(v, f)
    pts = cols = None
    if "init_points" in files:
        arr = np.loadtxt(d / files["init_points"], ndmin=2)
        pts, cols = arr[:, :3], arr[:, 3:6]
    gt_cams = None if doc.get("gt_cameras") is None else [Camera.from_dict(c) for c in doc["gt_cameras"]]
    return SceneBundle(
        cameras=cams, images=np.array(images), hair_masks=np.array(hair), body_masks=np.array(body),
        train=np.array(doc["train"], int), test=np.array(doc["test"], int), extent=float(doc["extent"]),
        gt_cameras=gt_cams, oracle_maps=oracle, gt_strands=gt, scalp=scalp, head_mesh=head_mesh,
        head=doc.get("head"), init_points=pts, init_colors=cols, meta=doc.get("meta", {}),
    )
