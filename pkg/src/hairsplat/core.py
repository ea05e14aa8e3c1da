"""Camera, rotation, orientation and spherical-harmonic math shared by every stage.

Conventions:
    * Quaternions are (w, x, y, z).
    * Cameras follow the OpenCV pinhole model: x right, y down, z forward.
      Pixel coordinates are (column, row) with pixel centers on integers.
    * Undirected 2D angles live in [0, pi); they are reduced modulo pi only
      when compared, never when stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

NEAR_PLANE = 1e-3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


class InvalidInput(ValueError):
    """Raised when an operation receives arguments outside its domain."""


# ---------------------------------------------------------------------------
# rotations


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion, normalized internally.

    Accepts a single quaternion (4,) or a batch (N, 4).
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidInput("quaternion must be finite and non-zero")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_to_rot_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`quat_to_rot` for batched quaternions.

    Includes the normalization, so the result is the gradient with respect to
    the raw (unnormalized) quaternion.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = grad_R.reshape(grad_R.shape[:-2] + (9,))
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = np.moveaxis(g, -1, 0)
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix; batched over leading axes."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            out[i] = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            out[i] = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            out[i] = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            out[i] = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out[out[:, 0] < 0] *= -1
    return out.reshape(R.shape[:-2] + (4,))


def build_covariance(s, q) -> np.ndarray:
    """Sigma = R S S^T R^T for scales ``s`` (> 0) and quaternion ``q``; batched."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(~(s > 0)):
        raise InvalidInput("scales must be strictly positive")
    R = quat_to_rot(q)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula; series expansion near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    K = hat(omega)
    if theta2 < 1e-16:
        return np.eye(3) + K + 0.5 * K @ K
    theta = math.sqrt(theta2)
    return np.eye(3) + math.sin(theta) / theta * K + (1 - math.cos(theta)) / theta2 * K @ K


def so3_exp_derivatives(omega) -> np.ndarray:
    """Partial derivatives dExp(omega)/d omega_i, shape (3, 3, 3) indexed [i]."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    E = np.eye(3)
    if theta2 < 1e-16:
        return np.stack([hat(E[i]) for i in range(3)])
    R = so3_exp(omega)
    out = np.empty((3, 3, 3))
    K = hat(omega)
    for i in range(3):
        v = np.cross(omega, (np.eye(3) - R) @ E[i])
        out[i] = (omega[i] * K + hat(v)) / theta2 @ R
    return out


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a learnable left-composed 6-DoF residual.

    ``R``/``t`` is the initial world-to-camera transform; ``omega`` (axis-angle,
    radians) and ``dt`` (meters) perturb it as
    ``[Exp(omega) | dt] o [R | t]``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = NEAR_PLANE

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInput("focal lengths must be positive")
        for name in ("R", "t", "omega", "dt"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def with_residual(self, omega, dt) -> "Camera":
        return replace(self, omega=np.asarray(omega, float).copy(), dt=np.asarray(dt, float).copy())

    def baked(self) -> "Camera":
        """Copy whose initial pose is the effective pose and residual is zero."""
        R, t = apply_camera_residual(self)
        return replace(self, R=R, t=t, omega=np.zeros(3), dt=np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        R, t = apply_camera_residual(self)
        return -R.T @ t

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
            "omega": self.omega.tolist(), "dt": self.dt.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            R=np.array(d["R"], float), t=np.array(d["t"], float),
            omega=np.array(d.get("omega", [0, 0, 0]), float),
            dt=np.array(d.get("dt", [0, 0, 0]), float),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for an OpenCV camera at ``eye`` looking at ``target``.

    ``up`` is the world up direction; it maps to -y in the image.
    """
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def apply_camera_residual(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Effective world-to-camera rotation and translation."""
    E = so3_exp(cam.omega)
    return E @ cam.R, E @ cam.t + cam.dt


def camera_residual_backward(cam: Camera, grad_R: np.ndarray, grad_t: np.ndarray):
    """Chain gradients on the effective (R, t) back to (omega, dt)."""
    grad_E = grad_R @ cam.R.T + np.outer(grad_t, cam.t)
    dE = so3_exp_derivatives(cam.omega)
    grad_omega = np.einsum("ijk,jk->i", dE, grad_E)
    return grad_omega, grad_t.copy()


def project_point(cam: Camera, x):
    """Pixel coordinates, depth and a culled flag for world point(s) ``x``."""
    R, t = apply_camera_residual(cam)
    xc = np.asarray(x, float) @ R.T + t
    z = xc[..., 2]
    culled = ~(z > cam.near)
    zs = np.where(culled, 1.0, z)
    px = np.stack([cam.fx * xc[..., 0] / zs + cam.cx, cam.fy * xc[..., 1] / zs + cam.cy], axis=-1)
    return px, z, culled


def projection_jacobian(cam: Camera, x) -> np.ndarray:
    """d pixel / d x_camera at world point(s) ``x``; shape (..., 2, 3)."""
    R, t = apply_camera_residual(cam)
    xc = np.asarray(x, float) @ R.T + t
    return jacobian_from_camera_points(cam, xc)


def jacobian_from_camera_points(cam: Camera, xc: np.ndarray) -> np.ndarray:
    x, y, z = xc[..., 0], xc[..., 1], xc[..., 2]
    iz = 1.0 / z
    J = np.zeros(xc.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx * iz
    J[..., 0, 2] = -cam.fx * x * iz * iz
    J[..., 1, 1] = cam.fy * iz
    J[..., 1, 2] = -cam.fy * y * iz * iz
    return J


# ---------------------------------------------------------------------------
# orientation


def angular_distance_undirected(a, b):
    """Distance between undirected lines at angles ``a`` and ``b`` (radians).

    Result lies in [0, pi/2].
    """
    d = np.mod(np.asarray(a, float) - np.asarray(b, float), np.pi)
    return np.minimum(d, np.pi - d)


def signed_undirected_difference(a, b):
    """(a - b) wrapped to [-pi/2, pi/2); its absolute value is the undirected distance."""
    return np.mod(np.asarray(a, float) - np.asarray(b, float) + np.pi / 2, np.pi) - np.pi / 2


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_num_coeffs(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise InvalidInput("SH degree must be in [0, 3]")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)^2), for unit directions."""
    dirs = np.asarray(dirs, float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives of :func:`sh_basis` w.r.t. the direction, shape (..., K, 3)."""
    dirs = np.asarray(dirs, float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_eval(coeffs: np.ndarray, direction) -> np.ndarray:
    """Raw SH color sum for coefficients (K, 3) along a unit direction.

    The renderer adds the 0.5 offset and clamps; this returns the bare sum.
    """
    coeffs = np.asarray(coeffs, float)
    degree = int(round(math.sqrt(coeffs.shape[-2]))) - 1
    if (degree + 1) ** 2 != coeffs.shape[-2]:
        raise InvalidInput("coefficient count must be a perfect square")
    basis = sh_basis(direction, degree)
    return np.einsum("...k,...kc->...c", basis, coeffs)


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, float) - 0.5) / SH_C0
