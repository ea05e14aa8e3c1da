"""Stage 1: lift 2D orientation maps into unstructured Gaussians.

Gaussians and per-view camera residuals are optimized against images,
hair/body masks and Gabor orientation maps.  Camera residuals train for
the first part of the schedule and then freeze.  The trained scene is
rendered back into every training view to give stage 2 denoised
supervision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, so3_exp
from .gaussians import (
    DensifyConfig,
    GaussianScene,
    GradStats,
    densify_and_prune,
    init_from_points,
    reset_opacity,
    save_checkpoint,
)
from .losses import LossWeights, ViewTargets, loss_gaussian_total
from .optim import Adam, CsvLog, camera_groups, gaussian_groups
from .orientation import OrientationMap
from .planes import read_planes, save_png, write_planes
from .render import RenderSettings, RenderTargets, render_backward, render_forward, save_render

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    def __init__(self, step: int, checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; last finite state in {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class LiftConfig:
    steps: int = 3000
    freeze_cameras_at: float | int = 0.5  # fraction of steps, or an explicit step if > 1
    optimize_cameras: bool = True
    sh_degree: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig | None = None  # None: built from the fields below
    densify_from: int = 500
    densify_until: float | int = 0.5  # fraction of steps, or an explicit step if > 1
    densify_every: int = 100
    opacity_reset_every: int = 1000  # while densifying; 0 disables
    pos_lr_init: float = 1.6e-4
    pos_lr_final: float = 1.6e-6
    scale_lr: float = 5e-3
    rot_lr: float = 1e-3
    opacity_lr: float = 5e-2
    sh_lr: float = 2.5e-3
    label_lr: float = 5e-2
    conf_lr: float = 5e-2
    max_gaussians: int = 50_000
    init_opacity: float = 0.1
    seed: int = 0
    log_every: int = 100

    def _at(self, f) -> int:
        return int(round(f * self.steps)) if f <= 1 else int(f)

    @property
    def freeze_step(self) -> int:
        return self._at(self.freeze_cameras_at)

    def densify_config(self) -> DensifyConfig:
        if self.densify is not None:
            return self.densify
        return DensifyConfig(max_gaussians=self.max_gaussians, start=self.densify_from,
                             stop=self._at(self.densify_until), interval=self.densify_every)

    def reset_steps(self) -> set[int]:
        """Opacity resets, every ``opacity_reset_every`` steps up to the end of densification."""
        if self.opacity_reset_every <= 0:
            return set()
        stop = self.densify_config().stop
        return set(range(self.opacity_reset_every, min(stop, self.steps) + 1, self.opacity_reset_every))


@dataclass
class LiftResult:
    scene: GaussianScene
    cameras: list  # refined cameras (residuals baked in)
    residuals: np.ndarray  # (V, 6) final omega | dt per view
    log: list
    stats: dict


def view_targets(bundle, maps: list[OrientationMap], i: int) -> ViewTargets:
    m = maps[i]
    return ViewTargets(bundle.images[i], bundle.hair_masks[i], bundle.body_masks[i], m.angle, m.valid)


def run_lifting(bundle, maps: list[OrientationMap], cfg: LiftConfig | None = None, out_dir: str | Path | None = None,
                settings: RenderSettings | None = None, init_scene: GaussianScene | None = None) -> LiftResult:
    """Optimize Gaussians and camera residuals on the training views of ``bundle``."""
    cfg = cfg or LiftConfig()
    settings = settings or RenderSettings()
    out_dir = Path(out_dir) if out_dir is not None else None
    train = np.asarray(bundle.train)
    if len(train) < 2:
        raise ValueError("lifting needs at least two training views")
    rng = np.random.default_rng(cfg.seed)
    if init_scene is not None:
        scene = init_scene.copy()
    else:
        scene = init_from_points(bundle.init_points, bundle.init_colors, cfg.sh_degree, cfg.init_opacity)
    extent = bundle.extent
    n_views = bundle.n_views
    adam = Adam(gaussian_groups(extent, cfg.steps, cfg.pos_lr_init, cfg.pos_lr_final, cfg.scale_lr, cfg.rot_lr,
                                cfg.opacity_lr, cfg.sh_lr, cfg.label_lr, cfg.conf_lr))
    for name, g in camera_groups(n_views, extent, cfg.steps, cfg.pos_lr_init, cfg.pos_lr_final, cfg.rot_lr).items():
        adam.add_group(name, g)
    cam_params = {}
    for i in range(n_views):
        cam_params[f"cam_omega_{i}"] = np.asarray(bundle.cameras[i].omega, float).copy()
        cam_params[f"cam_dt_{i}"] = np.asarray(bundle.cameras[i].dt, float).copy()
    dcfg = cfg.densify_config()
    stats = GradStats(len(scene))
    freeze = cfg.freeze_step if cfg.optimize_cameras else 0
    resets = cfg.reset_steps()
    fields_ = ["view", "rgb", "seg", "dir", "total", "n_gaussians"]
    csv = CsvLog(out_dir / "lift_loss.csv" if out_dir else None, fields_)
    ckpt = str(out_dir / "last_finite.ckpt") if out_dir else None
    order: list[int] = []
    counters = {"cloned": 0, "split": 0, "pruned": 0, "skipped_rows": 0}
    frozen_snapshot = None
    h, w = bundle.size
    ndc = np.array([w / 2.0, h / 2.0])
    for step in range(1, cfg.steps + 1):
        if not order:
            order = list(rng.permutation(train))
        vi = int(order.pop())
        base = bundle.cameras[vi]
        cam = base.with_residual(cam_params[f"cam_omega_{vi}"], cam_params[f"cam_dt_{vi}"])
        adam.schedule_step = step - 1
        prims = scene.to_primitives()
        out, ctx = render_forward(prims, cam, settings)
        res = loss_gaussian_total(out, view_targets(bundle, maps, vi), cfg.weights)
        if not np.isfinite(res.total):
            if ckpt:
                save_checkpoint(scene, ckpt)
            raise Diverged(step, ckpt)
        pg = render_backward(ctx, res.grads)
        gb = scene.primitives_backward(pg)
        grads = gb.scene_grads()
        counters["skipped_rows"] += adam.step(scene.params(), grads)
        if step <= freeze:
            adam.step(cam_params, {f"cam_omega_{vi}": gb.cam_omega, f"cam_dt_{vi}": gb.cam_dt})
        elif step == freeze + 1:
            frozen_snapshot = {k: v.copy() for k, v in cam_params.items()}
        stats.add(np.linalg.norm(pg.means2d * ndc, axis=1), ctx.proj.visible)
        terms = dict(res.terms)
        terms.update(view=vi, n_gaussians=len(scene))
        csv.log(step, terms)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("lift %d/%d view %d loss %.5f (rgb %.5f seg %.5f dir %.5f) n=%d", step, cfg.steps, vi,
                     res.total, res.terms["rgb"], res.terms["seg"], res.terms["dir"], len(scene))
        if dcfg.start <= step <= dcfg.stop and step % dcfg.interval == 0:
            d = densify_and_prune(scene, stats, step, dcfg, extent, rng)
            adam.remap(GaussianScene.PARAMS, d.parent, d.fresh)
            scene = d.scene
            counters["cloned"] += d.n_cloned
            counters["split"] += d.n_split
            counters["pruned"] += d.n_pruned
            stats = GradStats(len(scene))
        if step in resets:
            reset_opacity(scene)
            adam.remap(["opacity_logit"], np.arange(len(scene)), np.ones(len(scene), bool))
    csv.close()
    residuals = np.array([np.concatenate([cam_params[f"cam_omega_{i}"], cam_params[f"cam_dt_{i}"]])
                          for i in range(n_views)])
    cams = [bundle.cameras[i].with_residual(residuals[i, :3], residuals[i, 3:]).baked() for i in range(n_views)]
    st = dict(counters, n_gaussians=len(scene), freeze_step=freeze,
              cameras_bit_identical_after_freeze=(frozen_snapshot is None or all(
                  np.array_equal(frozen_snapshot[k], cam_params[k]) for k in cam_params)))
    if out_dir is not None:
        save_checkpoint(scene, out_dir / "scene.ckpt")
        np.savetxt(out_dir / "camera_residuals.txt", residuals, fmt="%.17g", header="omega(3) dt(3) per view")
    return LiftResult(scene, cams, residuals, csv.rows, st)


# ---------------------------------------------------------------------------
# supervision for stage 2


@dataclass
class Supervision:
    color: np.ndarray
    hair_mask: np.ndarray
    silhouette: np.ndarray
    orientation: OrientationMap

    def targets(self) -> ViewTargets:
        return ViewTargets(self.color, self.hair_mask, self.silhouette, self.orientation.angle, self.orientation.valid)


def supervision_from_render(targets: RenderTargets) -> Supervision:
    return Supervision(
        color=np.clip(targets.color, 0, 1),
        hair_mask=(targets.label > 0.5).astype(float),
        silhouette=np.clip(targets.silhouette, 0, 1),
        orientation=OrientationMap.from_render(targets),
    )


def render_supervision_set(scene: GaussianScene, cameras: list[Camera], settings: RenderSettings | None = None,
                           out_dir: str | Path | None = None) -> list[Supervision]:
    """One supervision record per camera, optionally written to ``out_dir``."""
    settings = settings or RenderSettings()
    prims = scene.to_primitives()
    out = []
    for i, cam in enumerate(cameras):
        targets, _ = render_forward(prims, cam, settings)
        sup = supervision_from_render(targets)
        out.append(sup)
        if out_dir is not None:
            d = Path(out_dir)
            save_render(targets, d / "renders", f"view_{i:03d}")
            write_planes(d, f"sup_{i:03d}", {
                "r": sup.color[..., 0], "g": sup.color[..., 1], "b": sup.color[..., 2],
                "hair": sup.hair_mask, "silhouette": sup.silhouette,
            }, kind="supervision")
            save_png(d / f"hair_{i:03d}.png", sup.hair_mask)
            sup.orientation.save(d, f"orient_{i:03d}")
    return out


def load_supervision(directory: str | Path, n_views: int) -> list[Supervision]:
    """Read back a directory written by :func:`render_supervision_set`."""
    d = Path(directory)
    out = []
    for i in range(n_views):
        pl, _ = read_planes(d, f"sup_{i:03d}", kind="supervision")
        color = np.stack([pl["r"], pl["g"], pl["b"]], axis=-1).astype(float)
        hair = pl["hair"].astype(float)
        sil = pl["silhouette"].astype(float)
        orient = OrientationMap.load(d, f"orient_{i:03d}")
        out.append(Supervision(color, hair, sil, orient))
    return out


# ---------------------------------------------------------------------------
# camera error


def rotation_errors_deg(est: list[Camera], ref: list[Camera], align: bool = True) -> np.ndarray:
    """Per-camera geodesic rotation error in degrees.

    With ``align`` the estimate is first rotated by the best global rotation
    (orthogonal Procrustes over the camera orientations), which removes the
    gauge freedom of joint scene/camera refinement.
    """
    Re = np.array([c.baked().R for c in est])
    Rr = np.array([c.baked().R for c in ref])
    A = np.eye(3)
    if align:
        # minimize sum |Re_i A - Rr_i|_F  ->  A = polar(sum Re_i^T Rr_i)
        M = np.einsum("nji,njk->ik", Re, Rr)
        U, _, Vt = np.linalg.svd(M)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
        A = U @ D @ Vt
    rel = np.einsum("nij,jk,nlk->nil", Re, A, Rr)
    cos = np.clip((np.trace(rel, axis1=1, axis2=2) - 1) / 2, -1, 1)
    return np.degrees(np.arccos(cos))


def translation_errors(est: list[Camera], ref: list[Camera]) -> np.ndarray:
    ce = np.array([c.baked().center for c in est])
    cr = np.array([c.baked().center for c in ref])
    return np.linalg.norm(ce - cr, axis=1)


__all__ = [
    "LiftConfig", "LiftResult", "Diverged", "run_lifting", "render_supervision_set", "Supervision",
    "supervision_from_render", "load_supervision", "rotation_errors_deg", "translation_errors", "view_targets",
    "so3_exp",
]
