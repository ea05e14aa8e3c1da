"""Stage runners over a run directory.

Layout (every stage reads its inputs from the previous stage's folder):

    run/config.yaml            resolved configuration
    run/scene/                 scene bundle (see ``scene.save_scene``)
    run/orient/                Gabor orientation maps, one plane set per view
    run/lift/                  stage-1 checkpoint, refined cameras, loss log
    run/lift/supervision/      stage-2 targets for the training views
    run/lift/heldout/          stage-1 orientation renders of the held-out views
    run/fit/                   coarse/fine states, strands, loss logs, turntable
    run/post/                  cleaned strands and statistics
    run/report.json|txt        metrics (deterministic for a fixed seed)
    run/timings.json           wall-clock per stage (not part of the report)
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import PipelineConfig, dump_config
from .core import Camera, look_at
from .fitting import FineState, init_coarse, init_fine, mean_hair_color, render_strands, run_coarse_fit, \
    run_fine_fit
from .gaussians import load_checkpoint, save_checkpoint
from .lifting import Supervision, load_supervision, render_supervision_set, run_lifting
from .orientation import OrientationMap, gabor_orientation_map
from .planes import save_png
from .report import report_metrics, write_report
from .scene import SceneBundle, generate_synthetic_scene, load_scene, save_scene
from .strands.io import load_hair, save_hair, save_strands_ply
from .strands.postprocess import postprocess_prune_reattach
from .strands.scalp import ScalpSurface

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage could not run, typically because an input is missing."""


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def save_cameras(cams: list[Camera], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"format": "hairsplat-cameras", "version": 1,
                                "cameras": [c.to_dict() for c in cams]}, indent=1))


def load_cameras(path: Path) -> list[Camera]:
    d = json.loads(_need(path, "camera file").read_text())
    if d.get("format") != "hairsplat-cameras" or d.get("version") != 1:
        raise StageError(f"{path}: not a version 1 camera file")
    return [Camera.from_dict(c) for c in d["cameras"]]


class Timer:
    def __init__(self, path: Path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {}

    def record(self, stage: str, seconds: float) -> None:
        self.data[stage] = round(seconds, 3)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1))


# ---------------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, out: Path) -> SceneBundle:
    bundle = generate_synthetic_scene(cfg.synth, cfg.seed)
    save_scene(bundle, out)
    return bundle


def stage_orient(scene_dir: Path, out: Path, bundle: SceneBundle | None = None) -> list[OrientationMap]:
    bundle = bundle or load_scene(scene_dir)
    maps = []
    for i, img in enumerate(bundle.images):
        m = gabor_orientation_map(img)
        m.save(out, f"orient_{i:03d}")
        maps.append(m)
    return maps


def load_orientation_maps(directory: Path, n_views: int) -> list[OrientationMap]:
    return [OrientationMap.load(directory, f"orient_{i:03d}") for i in range(n_views)]


def stage_lift(cfg: PipelineConfig, scene_dir: Path, orient_dir: Path, out: Path, bundle: SceneBundle | None = None,
               maps=None):
    bundle = bundle or load_scene(scene_dir)
    maps = maps or load_orientation_maps(orient_dir, bundle.n_views)
    out.mkdir(parents=True, exist_ok=True)
    res = run_lifting(bundle, maps, cfg.lift, out_dir=out)
    save_cameras(res.cameras, out / "cameras.json")
    (out / "lift_stats.json").write_text(json.dumps(res.stats, indent=1, sort_keys=True))
    train = [int(i) for i in bundle.train]
    sup_dir = out / "supervision"
    render_supervision_set(res.scene, [res.cameras[i] for i in train], out_dir=sup_dir)
    save_cameras([res.cameras[i] for i in train], sup_dir / "cameras.json")
    (sup_dir / "views.json").write_text(json.dumps({"views": train}))
    save_checkpoint(res.scene, sup_dir / "occluders.ckpt")
    # held-out views keep their given cameras (they take no part in refinement)
    test = [int(i) for i in bundle.test]
    held = render_supervision_set(res.scene, [bundle.cameras[i] for i in test])
    for i, s in zip(test, held):
        s.orientation.save(out / "heldout", f"orient_{i:03d}")
    return res


def images_supervision(bundle: SceneBundle, maps: list[OrientationMap], views) -> list[Supervision]:
    """Stage-2 targets straight from the input images (the no-lifting ablation)."""
    return [Supervision(bundle.images[i], bundle.hair_masks[i], bundle.body_masks[i], maps[i]) for i in views]


def turntable_cameras(n: int, center, distance: float, size: int, focal: float) -> list[Camera]:
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = np.asarray(center, float) + distance * np.array([np.sin(a), 0.15, np.cos(a)])
        R, t = look_at(eye, center)
        cams.append(Camera(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size, R, t))
    return cams


def stage_fit(cfg: PipelineConfig, sup_dir: Path, scalp_path: Path, out: Path, supervision=None, cameras=None,
              occluders=None) -> FineState:
    out.mkdir(parents=True, exist_ok=True)
    scalp = ScalpSurface.load_obj(_need(scalp_path, "scalp mesh"))
    if cameras is None:
        cameras = load_cameras(sup_dir / "cameras.json")
    if supervision is None:
        supervision = load_supervision(sup_dir, len(cameras))
    if occluders is None and (sup_dir / "occluders.ckpt").exists():
        occluders = load_checkpoint(sup_dir / "occluders.ckpt")
    fcfg = cfg.fit
    init = init_coarse(scalp, fcfg, mean_hair_color(supervision))
    init_dense = init_fine(init, scalp, fcfg)
    save_hair(out / "init_strands.hair", init_dense.points)
    coarse = run_coarse_fit(supervision, cameras, scalp, fcfg, occluders, state=init, out_dir=out)
    guides = init_fine(coarse, scalp, fcfg)
    save_hair(out / "coarse_strands.hair", guides.points)
    guides.save(out / "coarse_dense.npz")
    fine = run_fine_fit(coarse, supervision, cameras, scalp, fcfg, occluders, out_dir=out)
    save_hair(out / "strands.hair", fine.points)
    save_strands_ply(out / "strands.ply", fine.points)
    (out / "fit_stats.json").write_text(json.dumps(fine.stats, indent=1, sort_keys=True))
    ref = cameras[0]
    center = np.mean(fine.points[:, 0], axis=0) if len(fine.points) else np.zeros(3)
    dist = float(np.linalg.norm(ref.center - center))
    for k, cam in enumerate(turntable_cameras(8, center, dist, ref.width, ref.fx)):
        img = render_strands(fine.points, fine.sh, cam, occluders, fcfg.sh_degree).color
        save_png(out / "turntable" / f"frame_{k:02d}.png", np.clip(img, 0, 1))
    return fine


def stage_post(cfg: PipelineConfig, strands_path: Path, head_path: Path, scalp_path: Path, out: Path):
    from .strands.sdf import load_obj, TriMesh

    strands = load_hair(_need(strands_path, "strand file"))
    v, f, _ = load_obj(_need(head_path, "head mesh"))
    scalp = ScalpSurface.load_obj(_need(scalp_path, "scalp mesh"))
    arr = np.stack(strands) if strands else np.zeros((0, 2, 3))
    if cfg.post.enabled:
        res = postprocess_prune_reattach(arr, TriMesh(v, f), scalp, cfg.post.min_run, cfg.post.root_tol)
        pts, src, stats = res.strands, res.source, res.stats
    else:
        pts, src, stats = arr, np.arange(len(arr)), {"input": len(arr), "output": len(arr)}
    out.mkdir(parents=True, exist_ok=True)
    save_hair(out / "strands.hair", pts)
    save_strands_ply(out / "strands.ply", pts)
    np.savetxt(out / "source.txt", src, fmt="%d")
    (out / "post_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return pts, src, stats


def stage_report(run: Path) -> dict:
    if not run.is_dir():
        raise StageError(f"run directory not found: {run}")
    bundle = load_scene(_need(run / "scene", "scene"))
    post = run / "post" / "strands.hair"
    fit_state = _need(run / "fit" / "fine_state.npz", "fit result")
    fine = FineState.load(fit_state)
    if post.exists():
        strands = load_hair(post)
        strands = np.stack(strands) if strands else np.zeros((0, 2, 3))
        src = np.atleast_1d(np.loadtxt(run / "post" / "source.txt", dtype=np.int64, ndmin=1))
        sh = fine.sh[src] if len(src) else fine.sh[:0]
    else:
        strands, sh = fine.points, fine.sh
    occ_path = run / "lift" / "supervision" / "occluders.ckpt"
    occluders = load_checkpoint(occ_path) if occ_path.exists() else None
    gabor = load_orientation_maps(run / "orient", bundle.n_views) if (run / "orient").exists() else None
    lifted = None
    if (run / "lift" / "heldout").exists():
        lifted = {int(i): OrientationMap.load(run / "lift" / "heldout", f"orient_{int(i):03d}") for i in bundle.test}
    init = run / "fit" / "init_strands.hair"
    init_strands = load_hair(init) if init.exists() else None
    refined = load_cameras(run / "lift" / "cameras.json") if (run / "lift" / "cameras.json").exists() else None
    rep = report_metrics(strands, bundle, sh=sh, occluders=occluders, gabor_maps=gabor, lifted_maps=lifted,
                         init_strands=init_strands, refined_cameras=refined)
    fit_stats = run / "fit" / "fit_stats.json"
    if fit_stats.exists():
        rep["fit"] = json.loads(fit_stats.read_text())
    post_stats = run / "post" / "post_stats.json"
    if post_stats.exists():
        rep["post"] = json.loads(post_stats.read_text())
    write_report(rep, run)
    return rep


def run_all(cfg: PipelineConfig, run: Path) -> dict:
    """synth -> orient -> lift -> fit -> post -> report, all under ``run``."""
    run.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run / "config.yaml")
    timer = Timer(run / "timings.json")
    t = time.perf_counter()
    bundle = stage_synth(cfg, run / "scene")
    timer.record("synth", time.perf_counter() - t)
    t = time.perf_counter()
    maps = stage_orient(run / "scene", run / "orient", bundle)
    timer.record("orient", time.perf_counter() - t)
    t = time.perf_counter()
    lift = stage_lift(cfg, run / "scene", run / "orient", run / "lift", bundle, maps)
    timer.record("lift", time.perf_counter() - t)
    return run_stage2(cfg, run, bundle, maps, lift.cameras)


def run_stage2(cfg: PipelineConfig, run: Path, bundle: SceneBundle | None = None, maps=None, cameras=None) -> dict:
    """fit -> post -> report on a run directory whose scene, orient and lift stages exist."""
    bundle = bundle or load_scene(_need(run / "scene", "scene"))
    if cameras is None:
        cameras = load_cameras(run / "lift" / "cameras.json")
    timer = Timer(run / "timings.json")
    t = time.perf_counter()
    train = [int(i) for i in bundle.train]
    cams = [cameras[i] for i in train]
    sup = None
    if cfg.supervision == "images":
        maps = maps or load_orientation_maps(_need(run / "orient", "orientation maps"), bundle.n_views)
        sup = images_supervision(bundle, maps, train)
    elif cfg.supervision != "lifted":
        raise StageError(f"unknown supervision source {cfg.supervision!r}")
    stage_fit(cfg, run / "lift" / "supervision", run / "scene" / "scalp.obj", run / "fit", supervision=sup,
              cameras=cams)
    timer.record("fit", time.perf_counter() - t)
    t = time.perf_counter()
    stage_post(cfg, run / "fit" / "strands.hair", run / "scene" / "head.obj", run / "scene" / "scalp.obj",
               run / "post")
    timer.record("post", time.perf_counter() - t)
    t = time.perf_counter()
    rep = stage_report(run)
    timer.record("report", time.perf_counter() - t)
    return rep


def branch_run(cfg: PipelineConfig, base: Path, run: Path) -> dict:
    """Stage 2 onward under ``run``, reusing the scene, orient and lift outputs of ``base``.

    The stage-1 folders are linked, not copied.  Only stage-2 settings of
    ``cfg`` take effect.
    """
    for name in ("scene", "orient", "lift"):
        _need(base / name, f"{name} stage of {base}")
    run.mkdir(parents=True, exist_ok=True)
    for name in ("scene", "orient", "lift"):
        link = run / name
        if not link.exists():
            link.symlink_to((base / name).resolve(), target_is_directory=True)
    dump_config(cfg, run / "config.yaml")
    return run_stage2(cfg, run)
