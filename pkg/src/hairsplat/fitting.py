"""Stage 2: fit polyline strands to the stage-1 supervision.

Coarse: a grid of guide codes Z is decoded, blended to a denser set of
strands at random texture coordinates, converted to thin Gaussians and
rendered together with the stage-1 non-hair Gaussians as occluders.
Gradients run back through the rasterizer, the strand Gaussians, the
interpolation operator (its transpose) and the linear codec into Z.

Fine: the coarse map is decoded once at the full strand count and the
points themselves are optimized, roots re-projected onto the scalp after
every step.

Both stages add a latent smoothness penalty: a random strand subset is
encoded, interpolated onto a small texture grid and adjacent texels are
pulled together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, rgb_to_sh_dc
from .gaussians import GaussianScene
from .lifting import Diverged, Supervision
from .losses import LossWeights, loss_strand_total
from .optim import Adam, CsvLog, ExpDecay, Group
from .render import Primitives, RenderSettings, render_backward, render_forward
from .strands.codec import StrandCodec, to_local, to_world
from .strands.gaussians import HAIR_RADIUS, strand_gaussians_backward, strands_to_gaussians
from .strands.interp import knn_weights
from .strands.scalp import ScalpSurface

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    guide_res: int = 16
    dense_factor: int = 8
    k: int = 4
    n_points: int = 32
    code_dim: int = 24
    n_fine: int = 4000
    coarse_steps: int = 2000
    fine_steps: int = 1000
    init_length: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    z_lr_init: float = 2e-3
    z_lr_final: float = 2e-4
    app_lr: float = 2.5e-3
    # meters; a tenth of the Gaussian-mean rate, since free points with no
    # shape prior otherwise chase per-view noise of the supervision
    pts_lr_init: float = 1e-5
    pts_lr_final: float = 1e-7
    reg_subset: int = 256
    reg_res: int = 8
    sh_degree: int = 1
    hair_radius: float = HAIR_RADIUS
    occluders: bool = True
    seed: int = 0
    log_every: int = 100

    def codec(self) -> StrandCodec:
        return StrandCodec(self.n_points, self.code_dim)


@dataclass
class CoarseState:
    guide_uv: np.ndarray  # (G, 2), fixed
    z: np.ndarray  # (G, M)
    appearance: np.ndarray  # (G, K, 3) SH per guide
    log: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        np.savez(path, guide_uv=self.guide_uv, z=self.z, appearance=self.appearance)

    @staticmethod
    def load(path: str | Path) -> "CoarseState":
        with np.load(path) as d:
            return CoarseState(d["guide_uv"], d["z"], d["appearance"])


@dataclass
class FineState:
    points: np.ndarray  # (N, L, 3)
    sh: np.ndarray  # (N, K, 3)
    uv: np.ndarray  # (N, 2) texture coordinates of the roots
    log: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        np.savez(path, points=self.points, sh=self.sh, uv=self.uv)

    @staticmethod
    def load(path: str | Path) -> "FineState":
        with np.load(path) as d:
            return FineState(d["points"], d["sh"], d["uv"])


# ---------------------------------------------------------------------------
# texture-space sampling


def guide_grid(res: int) -> np.ndarray:
    """Cell-center texture coordinates of a res x res grid, row major."""
    c = (np.arange(res) + 0.5) / res
    u, v = np.meshgrid(c, c, indexing="xy")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def jittered_uv(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` stratified texture coordinates: one jittered sample per cell of
    the smallest square grid with at least ``n`` cells, cells chosen at random."""
    side = int(np.ceil(np.sqrt(n)))
    cells = rng.permutation(side * side)[:n]
    ij = np.stack([cells % side, cells // side], axis=1)
    return (ij + rng.random((n, 2))) / side


# ---------------------------------------------------------------------------
# latent regularizer


def grid_smoothness(zp: np.ndarray, shape: tuple[int, int]):
    """Mean squared difference between 4-adjacent texel codes and its gradient.

    ``zp`` is (rows * cols, M) in row-major order.
    """
    rows, cols = shape
    g = zp.reshape(rows, cols, -1)
    dh = g[:, 1:] - g[:, :-1]
    dv = g[1:] - g[:-1]
    n_pairs = dh.shape[0] * dh.shape[1] + dv.shape[0] * dv.shape[1]
    if n_pairs == 0:
        return 0.0, np.zeros_like(zp)
    value = (np.sum(dh * dh) + np.sum(dv * dv)) / n_pairs
    grad = np.zeros_like(g)
    grad[:, 1:] += 2 * dh / n_pairs
    grad[:, :-1] -= 2 * dh / n_pairs
    grad[1:] += 2 * dv / n_pairs
    grad[:-1] -= 2 * dv / n_pairs
    return float(value), grad.reshape(zp.shape)


def latent_regularizer(uv: np.ndarray, codes: np.ndarray, rng: np.random.Generator | None = None,
                       subset: int = 256, res: int | tuple[int, int] = 8, k: int = 4):
    """Smoothness of a latent map resampled on a low-res texture grid.

    A random subset of the coded strands (all of them when ``rng`` is None
    or the subset is large enough) is interpolated onto the grid texel
    centers.  Returns (value, gradient w.r.t. ``codes``).
    """
    codes = np.asarray(codes, float)
    n = len(codes)
    if n < 4:
        raise ValueError("latent regularizer needs at least 4 strands")
    if rng is not None and subset < n:
        idx = np.sort(rng.choice(n, subset, replace=False))
    else:
        idx = np.arange(n)
    shape = (res, res) if np.isscalar(res) else tuple(res)
    rows, cols = shape
    cu = (np.arange(cols) + 0.5) / cols
    cv = (np.arange(rows) + 0.5) / rows
    gu, gv = np.meshgrid(cu, cv, indexing="xy")
    W = knn_weights(uv[idx], np.stack([gu.ravel(), gv.ravel()], axis=1), k)
    value, g_zp = grid_smoothness(W.apply(codes[idx]), shape)
    grad = np.zeros_like(codes)
    grad[idx] = W.transpose(g_zp)
    return value, grad


# ---------------------------------------------------------------------------
# rendering helpers


def occluder_primitives(scene: GaussianScene | None, sh_degree: int = 1) -> Primitives:
    """Non-hair (label < 0.5) stage-1 Gaussians, rendered as fixed occluders."""
    if scene is None or len(scene) == 0:
        return Primitives.empty(sh_degree)
    prims = scene.subset(scene.label < 0.5).to_primitives()
    k = (sh_degree + 1) ** 2
    if prims.sh.shape[1] != k:
        sh = np.zeros((len(prims), k, 3))
        m = min(k, prims.sh.shape[1])
        sh[:, :m] = prims.sh[:, :m]
        prims.sh = sh
    return prims


def mean_hair_color(supervision: list[Supervision]) -> np.ndarray:
    cols = [s.color[s.hair_mask > 0.5] for s in supervision]
    cols = np.concatenate(cols) if cols else np.zeros((0, 3))
    return np.median(cols, axis=0) if len(cols) else np.full(3, 0.3)


def _render_strands(points, sh, occ: Primitives, cam: Camera, settings: RenderSettings, eps: float):
    sg = strands_to_gaussians(points, sh, eps)
    prims = Primitives.concat([sg.to_primitives(), occ]) if len(occ) else sg.to_primitives()
    out, ctx = render_forward(prims, cam, settings)
    return sg, out, ctx


def _backprop_strands(sg, ctx, grads, n_strands: int, n_points: int):
    pg = render_backward(ctx, grads)
    return strand_gaussians_backward(sg, pg.slice(slice(0, len(sg))), n_strands, n_points)


class _ViewCycle:
    """Epoch-wise random permutations over view indices."""

    def __init__(self, views, rng):
        self.views = np.asarray(views)
        self.rng = rng
        self.order: list[int] = []

    def next(self) -> int:
        if not self.order:
            self.order = list(self.rng.permutation(len(self.views)))
        return int(self.order.pop())


def _check_supervision(supervision, cameras):
    if len(supervision) != len(cameras) or not supervision:
        raise ValueError("need one supervision record per camera and at least one view")


# ---------------------------------------------------------------------------
# coarse stage


def init_coarse(scalp: ScalpSurface, cfg: FitConfig, color: np.ndarray) -> CoarseState:
    """Straight strands along the scalp normal, uniform appearance."""
    codec = cfg.codec()
    uv = guide_grid(cfg.guide_res)
    t = np.linspace(0.0, 1.0, cfg.n_points)
    local = np.zeros((len(uv), cfg.n_points, 3))
    local[:, :, 2] = cfg.init_length * t
    z = codec.encode_local(local)
    k = (cfg.sh_degree + 1) ** 2
    app = np.zeros((len(uv), k, 3))
    app[:, 0] = rgb_to_sh_dc(np.asarray(color, float))
    return CoarseState(uv, z, app)


def decode_dense(state: CoarseState, scalp: ScalpSurface, uv: np.ndarray, cfg: FitConfig):
    """World strands and appearance at texture coordinates ``uv``."""
    codec = cfg.codec()
    W = knn_weights(state.guide_uv, uv, cfg.k)
    roots, frames = scalp.sample(uv)
    local = W.apply(codec.decode_local(state.z))
    return to_world(local, roots, frames), W.apply(state.appearance), (W, roots, frames)


def coarse_objective(state: CoarseState, scalp: ScalpSurface, uv: np.ndarray, cam: Camera, target, cfg: FitConfig,
                     occ: Primitives, settings: RenderSettings, reg_rng: np.random.Generator | None = None):
    """One coarse step's loss at dense texture coordinates ``uv``.

    Gradients run rasterizer -> segment endpoints -> root frames ->
    interpolation transpose -> codec transpose.  Returns (LossResult,
    d/dz, d/d appearance).  ``reg_rng`` None uses every guide in the
    regularizer, which makes the objective deterministic.
    """
    codec = cfg.codec()
    pts, sh, (W, roots, frames) = decode_dense(state, scalp, uv, cfg)
    sg, out, ctx = _render_strands(pts, sh, occ, cam, settings, cfg.hair_radius)
    reg, g_reg = latent_regularizer(state.guide_uv, state.z, reg_rng, cfg.reg_subset, cfg.reg_res, cfg.k)
    res = loss_strand_total(out, target, reg, cfg.weights)
    if not np.isfinite(res.total):
        return res, None, None
    g_pts, g_sh = _backprop_strands(sg, ctx, res.grads, len(pts), cfg.n_points)
    g_local = np.einsum("nlj,nkj->nlk", g_pts, frames)
    g_z = codec.decode_local_backward(W.transpose(g_local)) + cfg.weights.sds * g_reg
    return res, g_z, W.transpose(g_sh)


def run_coarse_fit(supervision: list[Supervision], cameras: list[Camera], scalp: ScalpSurface,
                   cfg: FitConfig | None = None, occluders: GaussianScene | None = None,
                   state: CoarseState | None = None, settings: RenderSettings | None = None,
                   out_dir: str | Path | None = None) -> CoarseState:
    cfg = cfg or FitConfig()
    settings = settings or RenderSettings()
    _check_supervision(supervision, cameras)
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = init_coarse(scalp, cfg, mean_hair_color(supervision))
    state = CoarseState(state.guide_uv.copy(), state.z.copy(), state.appearance.copy())
    occ = occluder_primitives(occluders if cfg.occluders else None, cfg.sh_degree)
    params = {"z": state.z, "appearance": state.appearance}
    adam = Adam({"z": Group(ExpDecay(cfg.z_lr_init, cfg.z_lr_final, max(cfg.coarse_steps, 1))),
                 "appearance": Group(cfg.app_lr)})
    n_dense = len(state.guide_uv) * cfg.dense_factor
    views = _ViewCycle(range(len(cameras)), rng)
    out_dir = Path(out_dir) if out_dir is not None else None
    csv = CsvLog(out_dir / "coarse_loss.csv" if out_dir else None, ["view", "rgb", "seg", "dir", "reg", "total"])
    for step in range(1, cfg.coarse_steps + 1):
        vi = views.next()
        adam.schedule_step = step - 1
        uv = jittered_uv(n_dense, rng)
        res, g_z, g_app = coarse_objective(state, scalp, uv, cameras[vi], supervision[vi].targets(), cfg, occ,
                                           settings, rng)
        if not np.isfinite(res.total):
            ck = None
            if out_dir is not None:
                ck = str(out_dir / "coarse_last_finite.npz")
                state.save(ck)
            raise Diverged(step, ck)
        adam.step(params, {"z": g_z, "appearance": g_app})
        reg = res.terms["reg"]
        terms = dict(res.terms, view=vi)
        csv.log(step, terms)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("coarse %d/%d view %d loss %.5f (rgb %.5f seg %.5f dir %.5f reg %.3g)", step,
                     cfg.coarse_steps, vi, res.total, res.terms["rgb"], res.terms["seg"], res.terms["dir"], reg)
    csv.close()
    state.log = csv.rows
    if out_dir is not None:
        state.save(out_dir / "coarse_state.npz")
    return state


# ---------------------------------------------------------------------------
# fine stage


def init_fine(state: CoarseState, scalp: ScalpSurface, cfg: FitConfig) -> FineState:
    rng = np.random.default_rng([cfg.seed, 1])
    uv = jittered_uv(cfg.n_fine, rng)
    pts, sh, _ = decode_dense(state, scalp, uv, cfg)
    return FineState(pts, sh, uv)


def _strand_codes(points, roots, frames, codec):
    return codec.encode_local(to_local(points, roots, frames))


def _codes_backward(g_codes, frames, codec):
    """Gradient of codes w.r.t. world points, root included (frames held fixed)."""
    g_local = codec.encode_local_backward(g_codes)
    g_pts = np.einsum("nlk,nkj->nlj", g_local, frames)
    g_pts[:, 0] -= g_pts.sum(axis=1)
    return g_pts


def run_fine_fit(state: CoarseState | FineState, supervision: list[Supervision], cameras: list[Camera],
                 scalp: ScalpSurface, cfg: FitConfig | None = None, occluders: GaussianScene | None = None,
                 settings: RenderSettings | None = None, out_dir: str | Path | None = None) -> FineState:
    cfg = cfg or FitConfig()
    settings = settings or RenderSettings()
    _check_supervision(supervision, cameras)
    codec = cfg.codec()
    fine = init_fine(state, scalp, cfg) if isinstance(state, CoarseState) else state
    fine = FineState(fine.points.copy(), fine.sh.copy(), fine.uv.copy())
    rng = np.random.default_rng([cfg.seed, 2])
    occ = occluder_primitives(occluders if cfg.occluders else None, cfg.sh_degree)
    n, L, _ = fine.points.shape
    params = {"points": fine.points, "sh": fine.sh}
    adam = Adam({"points": Group(ExpDecay(cfg.pts_lr_init, cfg.pts_lr_final, max(cfg.fine_steps, 1)), eps=1e-15),
                 "sh": Group(cfg.app_lr)})
    views = _ViewCycle(range(len(cameras)), rng)
    out_dir = Path(out_dir) if out_dir is not None else None
    csv = CsvLog(out_dir / "fine_loss.csv" if out_dir else None, ["view", "rgb", "seg", "dir", "reg", "total"])
    roots, frames, uv = scalp.project_frames(fine.points[:, 0])
    fine.points[:, 0] = roots
    fine.uv = uv
    max_root = 0.0
    for step in range(1, cfg.fine_steps + 1):
        vi = views.next()
        adam.schedule_step = step - 1
        sg, out, ctx = _render_strands(fine.points, fine.sh, occ, cameras[vi], settings, cfg.hair_radius)
        # regularizer on a subset only: encoding everything would be wasted work
        sub = np.sort(rng.choice(n, min(cfg.reg_subset, n), replace=False))
        codes = _strand_codes(fine.points[sub], fine.points[sub, 0], frames[sub], codec)
        reg, g_codes = latent_regularizer(fine.uv[sub], codes, None, len(sub), cfg.reg_res, cfg.k)
        res = loss_strand_total(out, supervision[vi].targets(), reg, cfg.weights)
        if not np.isfinite(res.total):
            ck = None
            if out_dir is not None:
                ck = str(out_dir / "fine_last_finite.npz")
                fine.save(ck)
            raise Diverged(step, ck)
        g_pts, g_sh = _backprop_strands(sg, ctx, res.grads, n, L)
        g_pts[sub] += cfg.weights.sds * _codes_backward(g_codes, frames[sub], codec)
        adam.step(params, {"points": g_pts, "sh": g_sh})
        roots, frames, uv = scalp.project_frames(fine.points[:, 0])
        fine.points[:, 0] = roots
        fine.uv = uv
        max_root = max(max_root, float(scalp.distance(fine.points[:, 0]).max()))
        csv.log(step, dict(res.terms, view=vi))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("fine %d/%d view %d loss %.5f (rgb %.5f seg %.5f dir %.5f reg %.3g)", step, cfg.fine_steps, vi,
                     res.total, res.terms["rgb"], res.terms["seg"], res.terms["dir"], reg)
    csv.close()
    fine.log = csv.rows
    fine.stats = {"max_root_distance": max_root, "n_strands": n}
    if out_dir is not None:
        fine.save(out_dir / "fine_state.npz")
    return fine


def render_strands(points, sh, cam: Camera, occluders: GaussianScene | None = None, sh_degree: int = 1,
                   settings: RenderSettings | None = None, eps: float = HAIR_RADIUS):
    """Forward-only render of strands (plus optional occluders)."""
    occ = occluder_primitives(occluders, sh_degree)
    if len(points) == 0:
        return render_forward(occ, cam, settings or RenderSettings())[0]
    return _render_strands(points, sh, occ, cam, settings or RenderSettings(), eps)[1]
