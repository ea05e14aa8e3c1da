"""Adam with named parameter groups, learning-rate schedules and a CSV loss log."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import InvalidInput


@dataclass
class ExpDecay:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""

    lr_init: float
    lr_final: float
    max_steps: int

    def __call__(self, step: int) -> float:
        if self.lr_init == 0.0:
            return 0.0
        t = min(max(step / max(self.max_steps, 1), 0.0), 1.0)
        return math.exp((1 - t) * math.log(self.lr_init) + t * math.log(self.lr_final))


@dataclass
class Group:
    lr: float | ExpDecay
    eps: float = 1e-8

    def rate(self, step: int) -> float:
        return self.lr(step) if callable(self.lr) else float(self.lr)


class Adam:
    """Adam over a dict of named arrays.

    Each group keeps its own step counter, so a group only advances when it
    receives a gradient (cameras that are not sampled keep still).  Rows
    (first axis) with a non-finite gradient are skipped and counted.
    """

    def __init__(self, groups: dict[str, Group], beta1: float = 0.9, beta2: float = 0.999):
        self.groups = dict(groups)
        self.beta1 = beta1
        self.beta2 = beta2
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {k: 0 for k in groups}
        self.schedule_step = 0  # drives ExpDecay schedules
        self.skipped = 0

    def add_group(self, name: str, group: Group) -> None:
        self.groups[name] = group
        self.t[name] = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> int:
        """Update ``params`` in place for every name present in ``grads``.

        Returns the number of rows skipped because of non-finite gradients.
        """
        skipped = 0
        for name, g in grads.items():
            if name not in self.groups:
                raise InvalidInput(f"no optimizer group named {name!r}")
            p = params[name]
            if p.shape != g.shape:
                raise InvalidInput(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            group = self.groups[name]
            lr = group.rate(self.schedule_step)
            self.t[name] += 1
            t = self.t[name]
            finite = np.isfinite(g)
            if p.ndim > 1:
                ok_rows = finite.reshape(finite.shape[0], -1).all(axis=1)
                ok = ok_rows.reshape((-1,) + (1,) * (p.ndim - 1))
                n_bad = int((~ok_rows).sum())
            else:
                ok = finite
                n_bad = int((~finite).sum()) if p.ndim == 1 else int(not finite)
            skipped += n_bad
            g = np.where(ok, g, 0.0)
            m, v = self.m[name], self.v[name]
            m_new = self.beta1 * m + (1 - self.beta1) * g
            v_new = self.beta2 * v + (1 - self.beta2) * g * g
            np.copyto(m, m_new, where=np.broadcast_to(ok, m.shape))
            np.copyto(v, v_new, where=np.broadcast_to(ok, v.shape))
            if lr == 0.0:
                continue
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            upd = lr * mhat / (np.sqrt(vhat) + group.eps)
            p -= np.where(ok, upd, 0.0)
        self.skipped += skipped
        return skipped

    def remap(self, names, parent: np.ndarray, fresh: np.ndarray) -> None:
        """Reindex moments after densification: row i takes ``parent[i]``'s
        moments, and rows flagged ``fresh`` start from zero."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                arr = store[name][parent].copy()
                arr[fresh] = 0.0
                store[name] = arr


def gaussian_groups(extent: float, total_steps: int, pos_lr_init: float = 1.6e-4, pos_lr_final: float = 1.6e-6,
                    scale_lr: float = 5e-3, rot_lr: float = 1e-3, opacity_lr: float = 5e-2,
                    sh_lr: float = 2.5e-3, label_lr: float = 5e-2, conf_lr: float = 5e-2) -> dict[str, Group]:
    pos = ExpDecay(pos_lr_init * extent, pos_lr_final * extent, total_steps)
    return {
        "means": Group(pos, eps=1e-15),
        "log_scales": Group(scale_lr),
        "quats": Group(rot_lr),
        "opacity_logit": Group(opacity_lr),
        "sh": Group(sh_lr),
        "label_logit": Group(label_lr),
        "log_conf": Group(conf_lr),
    }


def camera_groups(n_cams: int, extent: float, total_steps: int, pos_lr_init: float = 1.6e-4,
                  pos_lr_final: float = 1.6e-6, rot_lr: float = 1e-3) -> dict[str, Group]:
    """Rotation residuals use the rotation rate, translations the mean schedule."""
    pos = ExpDecay(pos_lr_init * extent, pos_lr_final * extent, total_steps)
    out = {}
    for i in range(n_cams):
        out[f"cam_omega_{i}"] = Group(rot_lr)
        out[f"cam_dt_{i}"] = Group(pos, eps=1e-15)
    return out


class CsvLog:
    """Streams one row per step: step, each loss term, total."""

    def __init__(self, path: str | Path | None, fields: list[str]):
        self.fields = ["step"] + list(fields)
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=self.fields, extrasaction="ignore")
            self._writer.writeheader()

    def log(self, step: int, terms: dict) -> None:
        row = {"step": step, **{k: terms.get(k, "") for k in self.fields[1:]}}
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                   for k, v in row.items()})

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
