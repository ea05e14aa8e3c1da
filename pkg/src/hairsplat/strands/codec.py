"""Linear strand codec: a fixed orthonormal basis over the point index.

Each axis of a root-frame strand is expanded in ``M // 3`` modes that all
vanish at the root: a linear ramp followed by ``1 - cos(pi k t)`` for
``k = 1 .. M/3 - 1``, orthonormalized (Gram-Schmidt via QR, ramp first).
A straight strand along the normal is therefore a single mode.  The code
is laid out as ``[tangent modes, bitangent modes, normal modes]``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..core import InvalidInput


@lru_cache(maxsize=16)
def strand_basis(n_points: int, n_modes: int) -> np.ndarray:
    """Orthonormal (n_points, n_modes) basis with every column zero at index 0."""
    if n_points < 2:
        raise InvalidInput("strands need at least 2 points")
    if not 1 <= n_modes <= n_points - 1:
        raise InvalidInput(f"need 1 <= modes per axis <= {n_points - 1}, got {n_modes}")
    t = np.linspace(0.0, 1.0, n_points)
    cols = [t] + [1.0 - np.cos(np.pi * k * t) for k in range(1, n_modes)]
    q, r = np.linalg.qr(np.stack(cols, axis=1))
    q = q * np.sign(np.diag(r))  # keep the ramp positive
    q[0] = 0.0
    q.setflags(write=False)
    return q


class StrandCodec:
    def __init__(self, n_points: int = 32, code_dim: int = 24):
        if code_dim % 3:
            raise InvalidInput("code dimension must be a multiple of 3")
        self.n_points = n_points
        self.code_dim = code_dim
        self.basis = strand_basis(n_points, code_dim // 3)

    @property
    def modes(self) -> int:
        return self.code_dim // 3

    def _check(self, local: np.ndarray) -> None:
        if local.shape[-2:] != (self.n_points, 3):
            raise InvalidInput(f"expected strands of shape (..., {self.n_points}, 3), got {local.shape}")

    # root-frame versions: strands given as offsets in their TBN frame
    def encode_local(self, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local, float)
        self._check(local)
        coef = np.einsum("lp,...lc->...cp", self.basis, local)
        return coef.reshape(local.shape[:-2] + (self.code_dim,))

    def decode_local(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, float)
        if z.shape[-1] != self.code_dim:
            raise InvalidInput(f"expected codes of size {self.code_dim}, got {z.shape[-1]}")
        coef = z.reshape(z.shape[:-1] + (3, self.modes))
        return np.einsum("lp,...cp->...lc", self.basis, coef)

    # the transposes, for backpropagation
    def decode_local_backward(self, grad_local: np.ndarray) -> np.ndarray:
        return self.encode_local(grad_local)

    def encode_local_backward(self, grad_z: np.ndarray) -> np.ndarray:
        return self.decode_local(grad_z)

    # world versions
    def encode(self, strands: np.ndarray, roots: np.ndarray, frames: np.ndarray) -> np.ndarray:
        """Codes of world strands given root points (N, 3) and frames (N, 3, 3)."""
        local = to_local(strands, roots, frames)
        return self.encode_local(local)

    def decode(self, z: np.ndarray, roots: np.ndarray, frames: np.ndarray) -> np.ndarray:
        return to_world(self.decode_local(z), roots, frames)


def to_local(strands, roots, frames):
    """World strands (N, L, 3) to root-frame offsets (rows of ``frames`` are T, B, N)."""
    return np.einsum("nlj,nkj->nlk", np.asarray(strands, float) - roots[:, None, :], frames)


def to_world(local, roots, frames):
    return roots[:, None, :] + np.einsum("nlk,nkj->nlj", local, frames)
