"""Held-out metrics for a reconstruction and their JSON / text report."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim
from .orientation import OrientationMap, oracle_orientation_map, orientation_error, pooled_error

REPORT_FORMAT = "hairsplat-report"
REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# geometry


_CANDIDATE_BUDGET = 2_000_000


def _point_segment_distance(p, a, b):
    ab = b - a
    den = np.einsum("ij,ij->i", ab, ab)
    t = np.where(den > 0, np.einsum("ij,ij->i", p - a, ab) / np.where(den > 0, den, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    q = a + t[:, None] * ab
    return np.linalg.norm(p - q, axis=1)


def point_to_polylines(points: np.ndarray, strands) -> np.ndarray:
    """Exact distance from every point to the nearest segment of any polyline.

    Candidate segments come from a KD-tree on segment midpoints: the nearest
    midpoint at distance d bounds the answer by d, so only segments whose
    midpoint lies within d + (longest half segment) can do better.
    """
    points = np.asarray(points, float).reshape(-1, 3)
    segs_a, segs_b = [], []
    for s in strands:
        s = np.asarray(s, float)
        if len(s) >= 2:
            segs_a.append(s[:-1])
            segs_b.append(s[1:])
    if not segs_a or len(points) == 0:
        return np.full(len(points), np.inf)
    a = np.concatenate(segs_a)
    b = np.concatenate(segs_b)
    mid = 0.5 * (a + b)
    half = 0.5 * np.linalg.norm(b - a, axis=1).max()
    tree = cKDTree(mid)
    d0, _ = tree.query(points)
    r = d0 + half + 1e-12
    counts = tree.query_ball_point(points, r, return_length=True)
    out = np.full(len(points), np.inf)
    # blocks of points whose candidate lists fit a fixed budget; far-off points
    # can have thousands of candidates each
    start = 0
    csum = np.concatenate([[0], np.cumsum(counts)])
    while start < len(points):
        stop = max(start + 1, int(np.searchsorted(csum, csum[start] + _CANDIDATE_BUDGET, side="right")) - 1)
        idx = np.arange(start, stop)
        cand = tree.query_ball_point(points[idx], r[idx])
        n = counts[idx]
        flat = np.fromiter((j for c in cand for j in c), np.int64, int(n.sum()))
        owner = np.repeat(idx, n)
        d = _point_segment_distance(points[owner], a[flat], b[flat])
        np.minimum.at(out, owner, d)
        start = stop
    return out


def bidirectional_distance(result, reference) -> dict:
    """Mean point-to-polyline distance in both directions and their average (meters)."""
    res = [np.asarray(s, float) for s in result]
    ref = [np.asarray(s, float) for s in reference]
    if not res or not ref:
        return {"result_to_gt": None, "gt_to_result": None, "mean": None}
    d1 = point_to_polylines(np.concatenate(res), ref).mean()
    d2 = point_to_polylines(np.concatenate(ref), res).mean()
    return {"result_to_gt": float(d1), "gt_to_result": float(d2), "mean": float(0.5 * (d1 + d2))}


# ---------------------------------------------------------------------------
# image metrics


def mask_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    p = np.asarray(pred) > threshold
    g = np.asarray(gt) > threshold
    union = int((p | g).sum())
    return float((p & g).sum() / union) if union else 1.0


def strand_masks(strands: np.ndarray, cam, bundle) -> np.ndarray:
    """Hair coverage of ``strands`` drawn exactly like the scene's own masks."""
    from .scene import render_view

    cfg = bundle.meta.get("config", {})
    head = bundle.head or {"center": [0.0, 0.0, 0.0], "radius": 0.0}
    strands = np.asarray(strands, float)
    if len(strands) == 0:
        return np.zeros((cam.height, cam.width))
    albedo = np.full((len(strands), 3), 0.5)
    _, hair, _ = render_view(cam, strands, albedo, np.asarray(head["center"], float), float(head["radius"]),
                             int(cfg.get("supersample", 3)), float(cfg.get("stroke_px", 2.0)))
    return hair


def projected_orientation(strands: np.ndarray, cam, bundle) -> OrientationMap:
    from .scene import sphere_depth

    zbuf = None
    if bundle.head is not None:
        zbuf, _ = sphere_depth(cam, np.asarray(bundle.head["center"], float), float(bundle.head["radius"]))
    if len(strands) == 0:
        return OrientationMap.empty(cam.height, cam.width)
    return oracle_orientation_map(np.asarray(strands, float), cam, 1, zbuf=zbuf)


# ---------------------------------------------------------------------------


def _round(x, nd: int = 9):
    """Round floats for the report so it is stable text; None passes through."""
    if x is None:
        return None
    if isinstance(x, dict):
        return {k: _round(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, nd) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(round(float(x), nd))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def report_metrics(strands, bundle, sh=None, occluders=None, gabor_maps=None, lifted_maps=None, init_strands=None,
                   refined_cameras=None, sh_degree: int = 1, views=None) -> dict:
    """Metrics of a strand reconstruction on the held-out views of ``bundle``.

    ``gabor_maps`` and ``lifted_maps`` (per view, indexed like the bundle)
    add the 2D-vs-lifted orientation comparison; ``init_strands`` adds the
    geometric improvement over the stage-2 initialization.
    """
    from .fitting import render_strands

    strands = np.asarray(strands, float) if len(strands) else np.zeros((0, 2, 3))
    views = list(bundle.test if views is None else views)
    cams = bundle.gt_cameras if bundle.gt_cameras is not None else bundle.cameras
    out: dict = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "n_strands": int(len(strands)),
                 "views": [int(v) for v in views]}

    orient_pairs, ious, l1s, ssims, per_view = [], [], [], [], []
    for v in views:
        cam = cams[v]
        row = {"view": int(v)}
        if bundle.oracle_maps is not None:
            pm = projected_orientation(strands, cam, bundle)
            e = orientation_error(pm, bundle.oracle_maps[v])
            orient_pairs.append((pm, bundle.oracle_maps[v]))
            row["orientation_deg"] = e.mean_deg
            row["orientation_pixels"] = e.count
        iou = mask_iou(strand_masks(strands, cam, bundle), bundle.hair_masks[v])
        ious.append(iou)
        row["iou"] = iou
        if sh is not None and len(strands):
            img = np.clip(render_strands(strands, sh, cam, occluders, sh_degree).color, 0, 1)
            l1 = float(np.abs(img - bundle.images[v]).mean())
            ss = float(ssim(img, bundle.images[v]))
            l1s.append(l1)
            ssims.append(ss)
            row["color_l1"] = l1
            row["color_ssim"] = ss
        per_view.append(row)

    if orient_pairs:
        pe = pooled_error(orient_pairs)
        out["orientation_error_deg"] = pe.mean_deg
        out["orientation_pixels"] = pe.count
        out["orientation_overlap_empty"] = pe.count == 0
    out["iou"] = float(np.mean(ious)) if ious else None
    out["color_l1"] = float(np.mean(l1s)) if l1s else None
    out["color_ssim"] = float(np.mean(ssims)) if ssims else None

    if gabor_maps is not None or lifted_maps is not None:
        cmp_rows = {}
        for name, maps in (("gabor", gabor_maps), ("lifted", lifted_maps)):
            if maps is None or bundle.oracle_maps is None:
                continue
            pe = pooled_error([(maps[v], bundle.oracle_maps[v], bundle.hair_masks[v] > 0.5) for v in views])
            cmp_rows[name] = {"mean_deg": pe.mean_deg, "pixels": pe.count}
        out["orientation_maps"] = cmp_rows

    if bundle.gt_strands is not None:
        out["strand_distance"] = bidirectional_distance(strands, bundle.gt_strands)
        if init_strands is not None:
            init = bidirectional_distance(init_strands, bundle.gt_strands)
            out["strand_distance_init"] = init
            if init["mean"] and out["strand_distance"]["mean"] is not None:
                out["strand_distance_improvement"] = 1.0 - out["strand_distance"]["mean"] / init["mean"]

    if refined_cameras is not None and bundle.gt_cameras is not None:
        from .lifting import rotation_errors_deg, translation_errors

        tr = list(bundle.train)
        ref = [bundle.gt_cameras[i] for i in tr]
        before = [bundle.cameras[i] for i in tr]
        after = [refined_cameras[i] for i in tr]
        rb = float(rotation_errors_deg(before, ref, align=False).mean())
        ra = float(rotation_errors_deg(after, ref, align=False).mean())
        ral = float(rotation_errors_deg(after, ref, align=True).mean())
        out["cameras"] = {
            "rotation_before_deg": rb,
            "rotation_after_deg": ra,
            "rotation_after_aligned_deg": ral,
            "rotation_reduction": 1.0 - ra / rb if rb > 0 else None,
            "translation_before": float(translation_errors(before, ref).mean()),
            "translation_after": float(translation_errors(after, ref).mean()),
        }
    out["per_view"] = per_view
    return _round(out)


def format_report(rep: dict) -> str:
    def f(x, fmt="{:.4f}"):
        return "n/a" if x is None else fmt.format(x)

    lines = [f"strands: {rep.get('n_strands')}  held-out views: {rep.get('views')}"]
    if "orientation_error_deg" in rep:
        oe = rep["orientation_error_deg"]
        extra = "  (no overlap)" if rep.get("orientation_overlap_empty") else ""
        lines.append(f"projected orientation error: {f(oe, '{:.2f}')} deg over {rep['orientation_pixels']} px{extra}")
    lines.append(f"hair mask IoU: {f(rep.get('iou'))}")
    lines.append(f"color L1: {f(rep.get('color_l1'))}  SSIM: {f(rep.get('color_ssim'))}")
    for name, row in rep.get("orientation_maps", {}).items():
        lines.append(f"{name:>6} orientation maps: {f(row['mean_deg'], '{:.2f}')} deg over {row['pixels']} px")
    if "strand_distance" in rep:
        sd = rep["strand_distance"]
        lines.append(f"strand distance (mm): {f(sd['mean'] and sd['mean'] * 1e3, '{:.3f}')}")
        if "strand_distance_init" in rep:
            si = rep["strand_distance_init"]
            lines.append(f"  initialization (mm): {f(si['mean'] and si['mean'] * 1e3, '{:.3f}')}  "
                         f"improvement: {f(rep.get('strand_distance_improvement'), '{:.1%}')}")
    if "cameras" in rep:
        c = rep["cameras"]
        lines.append(f"camera rotation error: {c['rotation_before_deg']:.4f} -> {c['rotation_after_deg']:.4f} deg "
                     f"(aligned {c['rotation_after_aligned_deg']:.4f}; reduction {f(c['rotation_reduction'], '{:.1%}')})")
    return "\n".join(lines) + "\n"


def write_report(rep: dict, directory: str | Path, stem: str = "report") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    (d / f"{stem}.txt").write_text(format_report(rep))


def load_report(path: str | Path) -> dict:
    rep = json.loads(Path(path).read_text())
    if rep.get("format") != REPORT_FORMAT or rep.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not a version {REPORT_VERSION} report")
    return rep
