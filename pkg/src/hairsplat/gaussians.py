"""Unstructured Gaussian scene: parameters, activations, projection and densification."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    Camera,
    InvalidInput,
    quat_to_rot,
    quat_to_rot_backward,
    rgb_to_sh_dc,
    sh_num_coeffs,
)
from .render import (
    AXIS_PRINCIPAL,
    AXIS_SCREEN,
    CH_CONF,
    CH_LABEL,
    CH_RGB,
    Primitives,
    PrimitiveGrads,
    RenderSettings,
    project,
)

ANISO_RATIO = 1.05
CHECKPOINT_MAGIC = b"HSGS"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, float)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianScene:
    """Raw (pre-activation) parameters of N Gaussians.

    Activations: scales = exp(log_scales), opacity = sigmoid(opacity_logit),
    label = sigmoid(label_logit), confidence = exp(log_conf); quaternions are
    normalized on use.
    """

    means: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4)
    opacity_logit: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)
    label_logit: np.ndarray  # (N,)
    log_conf: np.ndarray  # (N,)

    PARAMS = ("means", "log_scales", "quats", "opacity_logit", "sh", "label_logit", "log_conf")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def label(self) -> np.ndarray:
        return sigmoid(self.label_logit)

    @property
    def conf(self) -> np.ndarray:
        return np.exp(self.log_conf)

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "GaussianScene":
        return GaussianScene(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(**{k: v[idx].copy() for k, v in self.params().items()})

    @staticmethod
    def concat(parts: list["GaussianScene"]) -> "GaussianScene":
        return GaussianScene(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in GaussianScene.PARAMS})

    @staticmethod
    def empty(sh_degree: int = 1) -> "GaussianScene":
        k = sh_num_coeffs(sh_degree)
        return GaussianScene(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, k, 3)), np.zeros(0), np.zeros(0),
        )

    def check_finite(self) -> None:
        for k, v in self.params().items():
            bad = ~np.isfinite(v.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise InvalidInput(f"non-finite {k} at Gaussian {int(np.flatnonzero(bad)[0])}")

    # -- rendering ---------------------------------------------------------

    def to_primitives(self) -> Primitives:
        rot = quat_to_rot(self.quats) if len(self) else np.zeros((0, 3, 3))
        s = self.scales
        M = rot * s[:, None, :]
        covs = M @ np.swapaxes(M, 1, 2)
        k = _principal_index(s)
        axes = rot[np.arange(len(self)), :, k]
        srt = np.sort(s, axis=1)
        mode = np.where(srt[:, 2] >= ANISO_RATIO * srt[:, 1], AXIS_PRINCIPAL, AXIS_SCREEN).astype(np.int8)
        return Primitives(
            means=self.means, covs=covs, axes=axes, axis_mode=mode, opacity=self.opacity,
            sh=self.sh, label=self.label, conf=self.conf,
        )

    def primitives_backward(self, pg: PrimitiveGrads) -> "GradientBuffers":
        n = len(self)
        rot = quat_to_rot(self.quats) if n else np.zeros((0, 3, 3))
        s = self.scales
        s2 = s * s
        G = 0.5 * (pg.covs + np.swapaxes(pg.covs, 1, 2))
        # Sigma = R diag(s^2) R^T
        g_rot = 2.0 * G @ rot * s2[:, None, :]
        k = _principal_index(s)
        g_rot[np.arange(n), :, k] += pg.axes
        g_s2 = np.einsum("nij,nik,nkj->nj", rot, G, rot)
        g_log_s = 2.0 * s2 * g_s2
        g_quat = quat_to_rot_backward(self.quats, g_rot) if n else np.zeros((0, 4))
        o = self.opacity
        lab = self.label
        return GradientBuffers(
            means=pg.means.copy(),
            log_scales=g_log_s,
            quats=g_quat,
            opacity_logit=pg.opacity * o * (1 - o),
            sh=pg.sh.copy(),
            label_logit=pg.label * lab * (1 - lab),
            log_conf=pg.conf * self.conf,
            cam_omega=pg.cam_omega.copy(),
            cam_dt=pg.cam_dt.copy(),
            means2d_norm=np.linalg.norm(pg.means2d, axis=1),
        )


@dataclass
class GradientBuffers:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    label_logit: np.ndarray
    log_conf: np.ndarray
    cam_omega: np.ndarray
    cam_dt: np.ndarray
    means2d_norm: np.ndarray

    def scene_grads(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GaussianScene.PARAMS}

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f.name)).all() for f in fields(self))


def _principal_index(s: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest axis
    return np.argmax(s, axis=1) if s.shape[0] else np.zeros(0, int)


# ---------------------------------------------------------------------------
# single-primitive helpers


@dataclass
class Gaussian:
    mean: np.ndarray
    log_scales: np.ndarray
    quat: np.ndarray
    opacity_logit: float = 0.0
    sh: np.ndarray | None = None
    label_logit: float = 0.0
    log_conf: float = 0.0

    def as_scene(self) -> GaussianScene:
        sh = np.zeros((4, 3)) if self.sh is None else np.asarray(self.sh, float)
        return GaussianScene(
            means=np.asarray(self.mean, float)[None],
            log_scales=np.asarray(self.log_scales, float)[None],
            quats=np.asarray(self.quat, float)[None],
            opacity_logit=np.array([self.opacity_logit], float),
            sh=sh[None],
            label_logit=np.array([self.label_logit], float),
            log_conf=np.array([self.log_conf], float),
        )


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # inverse of cov2d
    depth: float
    beta: float  # NaN when orientation-invalid
    orient_valid: bool
    rgb: np.ndarray
    label: float
    conf: float
    culled: bool


def principal_axes(scene: GaussianScene) -> np.ndarray:
    """World-frame axis of the largest activated scale for every Gaussian."""
    rot = quat_to_rot(scene.quats)
    k = _principal_index(scene.scales)
    return rot[np.arange(len(scene)), :, k]


def principal_axis(g: Gaussian | GaussianScene) -> np.ndarray:
    scene = g.as_scene() if isinstance(g, Gaussian) else g
    return principal_axes(scene)[0]


def project_gaussian(g: Gaussian | GaussianScene, cam: Camera, settings: RenderSettings | None = None):
    scene = g.as_scene() if isinstance(g, Gaussian) else g
    proj = project(scene.to_primitives(), cam, settings or RenderSettings())
    a, b, c = proj.conics[0]
    return ProjectedGaussian(
        mean2d=proj.means2d[0],
        cov2d=proj.cov2d[0],
        conic=np.array([[a, b], [b, c]]),
        depth=float(proj.depths[0]),
        beta=float(proj.angles[0]),
        orient_valid=bool(proj.orient_valid[0]),
        rgb=proj.feats[0, CH_RGB].copy(),
        label=float(proj.feats[0, CH_LABEL]),
        conf=float(proj.feats[0, CH_CONF]),
        culled=not bool(proj.visible[0]),
    )


# ---------------------------------------------------------------------------
# initialization and adaptive density control


def init_from_points(points, colors=None, sh_degree: int = 1, opacity: float = 0.1,
                     default_scale: float = 1e-3) -> GaussianScene:
    """One isotropic Gaussian per point, sized by the mean distance to 3 neighbors."""
    points = np.asarray(points, float).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise InvalidInput("need at least one point")
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        scale = d[:, 1:].mean(axis=1)
        scale = np.where(scale > 0, scale, default_scale)
    else:
        scale = np.full(1, default_scale)
    K = sh_num_coeffs(sh_degree)
    sh = np.zeros((n, K, 3))
    rgb = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, float).reshape(n, 3)
    sh[:, 0] = rgb_to_sh_dc(rgb)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianScene(
        means=points.copy(),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        quats=quats,
        opacity_logit=np.full(n, float(logit(opacity))),
        sh=sh,
        label_logit=np.zeros(n),
        log_conf=np.zeros(n),
    )


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_divisor: float = 1.6
    min_opacity: float = 0.005
    max_gaussians: int = 50_000
    interval: int = 100
    start: int = 500
    stop: int = 1800


class GradStats:
    """Running mean of screen-space positional gradient magnitudes."""

    def __init__(self, n: int):
        self.accum = np.zeros(n)
        self.count = np.zeros(n)

    def add(self, norms: np.ndarray, visible: np.ndarray) -> None:
        self.accum[visible] += norms[visible]
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)

    def reset(self, n: int) -> None:
        self.accum = np.zeros(n)
        self.count = np.zeros(n)


@dataclass
class DensifyResult:
    scene: GaussianScene
    parent: np.ndarray  # source index of every output Gaussian
    fresh: np.ndarray  # True for newly created Gaussians (no optimizer history)
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(scene: GaussianScene, grad_stats, iteration: int, config: DensifyConfig,
                      extent: float, rng: np.random.Generator, force: bool = False) -> DensifyResult:
    """Clone small / split large high-gradient Gaussians, then drop transparent ones.

    ``grad_stats`` is either a :class:`GradStats` or an array of mean
    screen-space gradient magnitudes.  Outside the scheduling window the
    scene is returned unchanged.
    """
    n = len(scene)
    ident = DensifyResult(scene, np.arange(n), np.zeros(n, bool))
    scheduled = config.start <= iteration <= config.stop and iteration % config.interval == 0
    if n == 0 or not (scheduled or force):
        return ident
    grads = grad_stats.mean() if isinstance(grad_stats, GradStats) else np.asarray(grad_stats, float)
    max_scale = scene.scales.max(axis=1)
    big = max_scale > config.percent_dense * extent
    cand = grads >= config.grad_threshold
    budget = max(config.max_gaussians - n, 0)
    # each clone adds one Gaussian, each split adds one net
    if cand.sum() > budget:
        idx = np.flatnonzero(cand)
        keep = idx[np.argsort(-grads[idx], kind="stable")[:budget]]
        cand = np.zeros(n, bool)
        cand[keep] = True
    clone = cand & ~big
    split = cand & big

    parts = [scene.subset(~split)]
    parent = [np.flatnonzero(~split)]
    fresh = [np.zeros(parent[0].size, bool)]
    ci = np.flatnonzero(clone)
    if ci.size:
        parts.append(scene.subset(ci))
        parent.append(ci)
        fresh.append(np.ones(ci.size, bool))
    si = np.flatnonzero(split)
    if si.size:
        kids = scene.subset(np.repeat(si, 2))
        rot = quat_to_rot(kids.quats)
        local = rng.standard_normal((kids.means.shape[0], 3)) * kids.scales
        kids.means = kids.means + np.einsum("nij,nj->ni", rot, local)
        kids.log_scales = kids.log_scales - np.log(config.split_divisor)
        parts.append(kids)
        parent.append(np.repeat(si, 2))
        fresh.append(np.ones(2 * si.size, bool))
    out = GaussianScene.concat(parts)
    parent = np.concatenate(parent)
    fresh = np.concatenate(fresh)

    alive = out.opacity >= config.min_opacity
    n_pruned = int((~alive).sum())
    out = out.subset(alive)
    return DensifyResult(out, parent[alive], fresh[alive], int(ci.size), int(si.size), n_pruned)


def reset_opacity(scene: GaussianScene, ceiling: float = 0.01) -> None:
    scene.opacity_logit = np.minimum(scene.opacity_logit, float(logit(ceiling)))


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(scene: GaussianScene, path: str | Path) -> None:
    """Little-endian binary checkpoint.

    Layout: magic ``HSGS`` | u32 version | u32 count | u32 sh_coeffs, then the
    float64 arrays means(3) log_scales(3) quats(4) opacity_logit(1)
    label_logit(1) log_conf(1) sh(sh_coeffs*3), each stored contiguously for
    all Gaussians.
    """
    n = len(scene)
    k = scene.sh.shape[1]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, n, k))
        for name in ("means", "log_scales", "quats", "opacity_logit", "label_logit", "log_conf", "sh"):
            f.write(np.ascontiguousarray(getattr(scene, name), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> GaussianScene:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidInput(f"{path}: not a Gaussian checkpoint")
    version, n, k = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for name, width in (("means", 3), ("log_scales", 3), ("quats", 4), ("opacity_logit", 1),
                        ("label_logit", 1), ("log_conf", 1), ("sh", k * 3)):
        arr = np.frombuffer(data, dtype="<f8", count=n * width, offset=off).astype(np.float64)
        off += 8 * n * width
        out[name] = arr.reshape((n, k, 3) if name == "sh" else ((n, width) if width > 1 else (n,)))
    return GaussianScene(**out)


def export_ply(scene: GaussianScene, path: str | Path) -> None:
    """Binary PLY point cloud of means with their view-independent colors."""
    from .core import SH_C0

    rgb = np.clip(scene.sh[:, 0] * SH_C0 + 0.5, 0, 1)
    verts = np.empty(len(scene), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                         ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    verts["x"], verts["y"], verts["z"] = scene.means.T
    c = (rgb * 255 + 0.5).astype(np.uint8)
    verts["red"], verts["green"], verts["blue"] = c.T
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(scene)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())
