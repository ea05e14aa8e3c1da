"""Command line entry point: ``hairsplat <stage> ...``.

Exit status: 0 on success, 1 when a stage fails, 2 for usage errors and
missing inputs.  Logs go to stderr, artifacts to the run directory.  The
only environment variable read is HAIRSPLAT_THREADS (render threads).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("hairsplat")

THREADS_ENV = "HAIRSPLAT_THREADS"


def _config(args):
    from .config import apply_overrides, load_config

    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None))
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    synth = {}
    if getattr(args, "style", None):
        synth["style"] = args.style
    if getattr(args, "views", None) is not None:
        if args.views < 2:
            raise ValueError("--views must be at least 2")
        n_test = min(cfg.synth.n_test, args.views // 5)
        synth["n_train"] = args.views - n_test
        synth["n_test"] = n_test
    if getattr(args, "strands", None) is not None:
        synth["n_strands"] = args.strands
    if synth:
        over["synth"] = synth
    if getattr(args, "steps", None) is not None:
        over["lift"] = {"steps": args.steps}
    fit = {}
    if getattr(args, "coarse_steps", None) is not None:
        fit["coarse_steps"] = args.coarse_steps
    if getattr(args, "fine_steps", None) is not None:
        fit["fine_steps"] = args.fine_steps
    if fit:
        over["fit"] = fit
    if getattr(args, "supervision_source", None):
        over["supervision"] = args.supervision_source
    return apply_overrides(cfg, over)


def _common(p, preset=True):
    p.add_argument("--config", type=Path, help="YAML file with overrides of the preset")
    if preset:
        p.add_argument("--preset", choices=["desk", "paper", "tiny"], help="named configuration (default desk)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hairsplat", description="Strand-based hair reconstruction on the CPU.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene bundle")
    p.add_argument("--out", type=Path, required=True, help="output scene directory")
    p.add_argument("--style", choices=["straight", "wavy", "curly"], help="hairstyle preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int, help="total number of views (about one in five is held out)")
    p.add_argument("--strands", type=int, help="number of ground-truth strands")
    _common(p)

    p = sub.add_parser("orient", help="Gabor orientation maps for every image of a scene")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p, preset=False)

    p = sub.add_parser("lift", help="stage 1: Gaussians and camera refinement")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--orient", type=Path, required=True, help="directory written by `orient`")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    _common(p)

    p = sub.add_parser("fit", help="stage 2: coarse latent and fine strand fitting")
    p.add_argument("--supervision", type=Path, required=True, help="lift/supervision directory")
    p.add_argument("--scalp", type=Path, required=True, help="scalp mesh (OBJ with texture coordinates)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--coarse-steps", type=int)
    p.add_argument("--fine-steps", type=int)
    _common(p)

    p = sub.add_parser("post", help="prune strands inside the head and reattach roots")
    p.add_argument("--strands", type=Path, required=True, help="HAIR file")
    p.add_argument("--head", type=Path, required=True, help="closed head mesh (OBJ)")
    p.add_argument("--scalp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("report", help="metrics for a run directory")
    p.add_argument("--run", type=Path, required=True)
    _common(p, preset=False)

    p = sub.add_parser("all", help="synth, orient, lift, fit, post and report into one run directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--style", choices=["straight", "wavy", "curly"])
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--strands", type=int)
    p.add_argument("--steps", type=int, help="stage-1 steps")
    p.add_argument("--coarse-steps", type=int)
    p.add_argument("--fine-steps", type=int)
    p.add_argument("--supervision-source", choices=["lifted", "images"],
                   help="stage-2 targets: stage-1 renders (default) or the raw images")
    _common(p)
    return ap


def _threads() -> None:
    val = os.environ.get(THREADS_ENV)
    if not val:
        return
    try:
        n = int(val)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {val!r}") from None
    from . import raster

    raster.set_threads(n)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from . import pipeline as pl
    from .planes import FormatError
    from .scene import SceneError

    try:
        _threads()
        cfg = _config(args)
    except (ValueError, OSError) as e:
        print(f"hairsplat: {e}", file=sys.stderr)
        return 2
    try:
        if args.cmd == "synth":
            b = pl.stage_synth(cfg, args.out)
            log.info("wrote %d views to %s", b.n_views, args.out)
        elif args.cmd == "orient":
            pl.stage_orient(args.scene, args.out)
        elif args.cmd == "lift":
            pl.stage_lift(cfg, args.scene, args.orient, args.out)
        elif args.cmd == "fit":
            pl.stage_fit(cfg, args.supervision, args.scalp, args.out)
        elif args.cmd == "post":
            pl.stage_post(cfg, args.strands, args.head, args.scalp, args.out)
        elif args.cmd == "report":
            from .report import format_report

            sys.stdout.write(format_report(pl.stage_report(args.run)))
        elif args.cmd == "all":
            from .report import format_report

            sys.stdout.write(format_report(pl.run_all(cfg, args.out)))
    except (pl.StageError, SceneError, FormatError, FileNotFoundError) as e:
        print(f"hairsplat {args.cmd}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # any stage failure is a nonzero exit, with the traceback in the log
        log.exception("stage %s failed", args.cmd)
        print(f"hairsplat {args.cmd}: failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
