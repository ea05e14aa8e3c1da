"""Inverse-distance KNN interpolation of guide strands in texture space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import InvalidInput

EPS_D = 1e-6


@dataclass
class GuideWeights:
    """Sparse interpolation operator: query q blends guides ``index[q]`` with ``weight[q]``."""

    index: np.ndarray  # (Q, k) int
    weight: np.ndarray  # (Q, k), rows sum to 1
    n_guides: int

    def apply(self, guide_values: np.ndarray) -> np.ndarray:
        """Blend per-guide arrays (G, ...) into per-query arrays (Q, ...)."""
        g = np.asarray(guide_values, float)
        w = self.weight.reshape(self.weight.shape + (1,) * (g.ndim - 1))
        return (w * g[self.index]).sum(axis=1)

    def transpose(self, query_grads: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`apply`: scatter per-query gradients back onto guides."""
        q = np.asarray(query_grads, float)
        out = np.zeros((self.n_guides,) + q.shape[1:])
        w = self.weight.reshape(self.weight.shape + (1,) * (q.ndim - 1))
        np.add.at(out, self.index, w * q[:, None])
        return out

    def dense(self) -> np.ndarray:
        m = np.zeros((self.index.shape[0], self.n_guides))
        np.add.at(m, (np.arange(len(m))[:, None], self.index), self.weight)
        return m


def knn_weights(guide_uv, query_uv, k: int = 4, eps_d: float = EPS_D) -> GuideWeights:
    """k nearest guides in UV space with weights proportional to 1/(d + eps_d).

    Distance ties go to the lower guide index.  A query that coincides with
    a guide gets that guide alone with weight exactly 1.
    """
    g = np.atleast_2d(np.asarray(guide_uv, float))
    q = np.atleast_2d(np.asarray(query_uv, float))
    if len(g) == 0:
        raise InvalidInput("interpolation needs at least one guide")
    k = min(k, len(g))
    d = np.sqrt((q[:, None, 0] - g[None, :, 0]) ** 2 + (q[:, None, 1] - g[None, :, 1]) ** 2)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(d, order, axis=1)
    w = 1.0 / (dk + eps_d)
    w = w / w.sum(axis=1, keepdims=True)
    exact = dk[:, 0] == 0.0
    if np.any(exact):
        w[exact] = 0.0
        w[exact, 0] = 1.0
    return GuideWeights(order, w, len(g))


def interpolate_guides(guide_uv, guide_local, query_uv, k: int = 4, eps_d: float = EPS_D):
    """Blend guides' root-frame polylines (G, L, 3) at the query coordinates.

    Returns the blended root-frame polylines (Q, L, 3) and the operator.
    Re-expressing them in each query's own frame is :func:`codec.to_world`.
    """
    weights = knn_weights(guide_uv, query_uv, k, eps_d)
    return weights.apply(guide_local), weights
