"""Pipeline configuration: named presets plus YAML overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .fitting import FitConfig
from .gaussians import DensifyConfig
from .lifting import LiftConfig
from .losses import LossWeights
from .scene import StyleConfig, SynthConfig


@dataclass
class PostConfig:
    min_run: int = 3
    root_tol: float = 1e-5
    enabled: bool = True


@dataclass
class PipelineConfig:
    preset: str = "desk"
    seed: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    post: PostConfig = field(default_factory=PostConfig)
    # stage-2 supervision: "lifted" (stage-1 renders) or "images" (raw images + Gabor maps)
    supervision: str = "lifted"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def preset(name: str = "desk") -> PipelineConfig:
    """``desk``: single-machine CPU scale.  ``paper``: the published counts and schedules."""
    if name == "desk":
        return PipelineConfig(preset="desk")
    if name == "paper":
        return PipelineConfig(
            preset="paper",
            lift=LiftConfig(steps=30_000, freeze_cameras_at=15_000, densify_from=500, densify_until=15_000,
                            densify_every=100, opacity_reset_every=3000, max_gaussians=1_000_000),
            # 1,000 guides (a 32 x 32 grid is the nearest square) interpolated to ~10,000 strands
            fit=FitConfig(guide_res=32, dense_factor=10, n_fine=30_000, coarse_steps=20_000, fine_steps=10_000,
                          reg_subset=1000),
        )
    if name == "tiny":
        # smoke-test scale: exercises every stage in well under a minute
        return PipelineConfig(
            preset="tiny",
            synth=SynthConfig(n_strands=60, n_train=6, n_test=2, width=48, height=48, focal=75.0, n_init_points=800),
            lift=LiftConfig(steps=60, densify_from=20, densify_until=40, densify_every=20, opacity_reset_every=0,
                            log_every=0),
            fit=FitConfig(guide_res=4, dense_factor=4, n_fine=64, coarse_steps=20, fine_steps=10, reg_subset=16,
                          reg_res=4, log_every=0),
        )
    raise ValueError(f"unknown preset {name!r} (expected desk, paper or tiny)")


_NESTED = {
    PipelineConfig: {"synth": SynthConfig, "lift": LiftConfig, "fit": FitConfig, "post": PostConfig},
    SynthConfig: {"style": StyleConfig},
    LiftConfig: {"weights": LossWeights, "densify": DensifyConfig},
    FitConfig: {"weights": LossWeights},
}


def _merge(obj, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be a mapping")
    names = {f.name for f in dataclasses.fields(obj)}
    nested = _NESTED.get(type(obj), {})
    kw = {}
    for k, v in data.items():
        if k not in names:
            raise ValueError(f"unknown config key {path + k!r}")
        if k in nested and v is not None:
            cur = getattr(obj, k)
            if k == "style" and isinstance(v, str):
                kw[k] = StyleConfig.preset(v)
                continue
            if cur is None:
                cur = nested[k]()
            kw[k] = _merge(cur, v, f"{path}{k}.")
        else:
            kw[k] = v
    return dataclasses.replace(obj, **kw)


def apply_overrides(cfg: PipelineConfig, data: dict) -> PipelineConfig:
    return _merge(cfg, data)


def load_config(path: str | Path | None = None, preset_name: str | None = None) -> PipelineConfig:
    """Preset (from the argument, else the file's ``preset`` key, else desk) with the file's overrides."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
    name = preset_name or data.get("preset", "desk")
    data = {k: v for k, v in data.items() if k != "preset"}
    return apply_overrides(preset(name), data)


def dump_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
