"""Rigid and similarity transforms, pinhole projection, epipolar geometry.

Conventions used throughout the package:

* A :class:`Pose` maps world coordinates into the camera frame,
  ``x_cam = R @ x_world + t``.
* Twists are 6-vectors ``(rho, phi)``: translational part first, rotational
  part second. Sim(3) tangent vectors append the log-scale ``sigma``.
* Pose updates are left-multiplicative: ``exp(xi) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
# series cut-over for coefficients that suffer cancellation well above SMALL_ANGLE
_SERIES_ANGLE = 1e-3


class GeometryError(ValueError):
    """Base class for geometric failures."""


class BehindCameraError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class LowParallaxError(GeometryError):
    pass


class LogSingularityError(GeometryError):
    """Rotation angle too close to pi for a unique logarithm."""


class SingularCovarianceError(GeometryError):
    pass


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """Return ``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t - sin t)/t^3``."""
    if theta < SMALL_ANGLE:
        return 1.0, 0.5, 1.0 / 6.0
    a = math.sin(theta) / theta
    b = 2.0 * math.sin(0.5 * theta) ** 2 / theta**2
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - math.sin(theta)) / theta**3
    return a, b, c


def _so3_series(phi, a: float, b: float) -> np.ndarray:
    """``I + a hat(phi) + b hat(phi)^2`` built elementwise (called per solver step)."""
    x, y, z = (float(v) for v in phi)
    xx, yy, zz, xy, xz, yz = x * x, y * y, z * z, x * y, x * z, y * z
    return np.array(
        [
            [1.0 - b * (yy + zz), b * xy - a * z, b * xz + a * y],
            [b * xy + a * z, 1.0 - b * (xx + zz), b * yz - a * x],
            [b * xz - a * y, b * yz + a * x, 1.0 - b * (xx + yy)],
        ]
    )


def exp_so3(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = math.sqrt(float(phi @ phi))
    a, b, _ = _rodrigues_coeffs(theta)
    return _so3_series(phi, a, b)


def log_so3(R: np.ndarray, check_pi: bool = True) -> np.ndarray:
    w = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if check_pi and theta > np.pi - 1e-6:
        raise LogSingularityError(f"rotation angle {theta:.12f} too close to pi")
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 1e-3:
        return w * (theta / s)
    # near pi: recover the axis from the symmetric part
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.linalg.norm(B[:, k])
    if axis @ w < 0:
        axis = -axis
    return axis * theta


def _left_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    _, b, c = _rodrigues_coeffs(math.sqrt(float(phi @ phi)))
    return _so3_series(phi, b, c)


def _inv_left_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    Phi = hat(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        d = (1.0 - 0.5 * theta * np.sin(theta) / (1.0 - np.cos(theta))) / theta**2
    return np.eye(3) - 0.5 * Phi + d * Phi @ Phi


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``x_cam = R x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (
            np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
            and abs(np.linalg.det(self.R) - 1.0) < tol
            and bool(np.all(np.isfinite(self.t)))
        )


def exp_se3(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    theta = math.sqrt(float(phi @ phi))
    a, b, c = _rodrigues_coeffs(theta)
    return Pose(_so3_series(phi, a, b), _so3_series(phi, b, c) @ rho)


def log_se3(pose: Pose) -> np.ndarray:
    """Twist ``(rho, phi)`` with ``exp_se3(log_se3(T)) == T``.

    Raises:
        LogSingularityError: if the rotation angle is within 1e-6 of pi.
    """
    phi = log_so3(pose.R)
    rho = _inv_left_jacobian_so3(phi) @ pose.t
    return np.concatenate([rho, phi])


def transform_point(pose: Pose, x_world: np.ndarray) -> np.ndarray:
    return pose.R @ np.asarray(x_world, dtype=float) + pose.t


def apply_increment(xi: np.ndarray, pose: Pose) -> Pose:
    """Left-multiplicative update ``exp(xi) @ pose``."""
    return exp_se3(xi) @ pose


def se3_adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint for the ``(rho, phi)`` ordering."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = pose.R
    Ad[:3, 3:] = hat(pose.t) @ pose.R
    Ad[3:, 3:] = pose.R
    return Ad


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic interpolation, ``alpha=0`` gives ``a`` and ``alpha=1`` gives ``b``."""
    return exp_se3(alpha * log_se3(b @ a.inverse())) @ a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def backproject(self, uv: np.ndarray) -> np.ndarray:
        """Normalized rays ``(x, y, 1)`` for pixels ``(N, 2)`` or ``(2,)``."""
        uv = np.asarray(uv, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )


def project(K: CameraIntrinsics, x_cam: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(x_cam, dtype=float)
    if not z > 0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def project_points(K: CameraIntrinsics, X_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns pixels and a positive-depth mask.

    Pixels for points with non-positive depth are set to NaN.
    """
    X_cam = np.atleast_2d(X_cam)
    z = X_cam[:, 2]
    ok = z > 1e-12
    zs = np.where(ok, z, np.nan)
    uv = np.empty((len(X_cam), 2))
    uv[:, 0] = K.fx * X_cam[:, 0] / zs + K.cx
    uv[:, 1] = K.fy * X_cam[:, 1] / zs + K.cy
    return uv, ok


def projection_jacobian(K: CameraIntrinsics, X_cam: np.ndarray) -> np.ndarray:
    """d(pixel)/d(x_cam), shape ``(N, 2, 3)``."""
    X_cam = np.atleast_2d(X_cam)
    x, y, z = X_cam[:, 0], X_cam[:, 1], X_cam[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(X_cam), 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz * iz
    return J


def point_twist_jacobian(X_cam: np.ndarray) -> np.ndarray:
    """d(exp(xi) x)/d(xi) at xi=0 for ``(rho, phi)`` ordering, shape ``(N, 3, 6)``."""
    X_cam = np.atleast_2d(X_cam)
    n = len(X_cam)
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    x, y, z = X_cam[:, 0], X_cam[:, 1], X_cam[:, 2]
    # -hat(x)
    J[:, 0, 4], J[:, 0, 5] = z, -y
    J[:, 1, 3], J[:, 1, 5] = -z, x
    J[:, 2, 3], J[:, 2, 4] = y, -x
    return J


def relative_pose(pose_k: Pose, pose_j: Pose) -> Pose:
    """Transform taking frame ``j`` coordinates into frame ``k``."""
    R = pose_k.R @ pose_j.R.T
    return Pose(R, -R @ pose_j.t + pose_k.t)


def essential_matrix(rel: Pose) -> np.ndarray:
    return hat(rel.t) @ rel.R


def epipolar_line(K: CameraIntrinsics, rel: Pose, u_src: np.ndarray) -> np.ndarray:
    """Line in the target image on which matches of ``u_src`` must lie.

    ``rel`` is ``relative_pose(pose_src, pose_tgt)``, i.e. it maps target-frame
    points into the source frame.
    """
    if np.linalg.norm(rel.t) <= 1e-12:
        raise DegenerateGeometryError("zero baseline")
    u_h = np.array([u_src[0], u_src[1], 1.0])
    return u_h @ K.K_inv.T @ essential_matrix(rel) @ K.K_inv


def epipolar_lines(K: CameraIntrinsics, rel: Pose, u_src: np.ndarray) -> np.ndarray:
    """Batched :func:`epipolar_line`, ``(N, 2) -> (N, 3)``."""
    if np.linalg.norm(rel.t) <= 1e-12:
        raise DegenerateGeometryError("zero baseline")
    F = K.K_inv.T @ essential_matrix(rel) @ K.K_inv
    u_h = np.column_stack([u_src, np.ones(len(u_src))])
    return u_h @ F


def epipolar_distance(line: np.ndarray, u_tgt: np.ndarray, cov_src: np.ndarray) -> float:
    """Signed point-line distance scaled by ``1/det(cov_src)``."""
    det = float(np.linalg.det(cov_src))
    if not det > 0:
        raise SingularCovarianceError(f"covariance determinant {det} is not positive")
    l0, l1, l2 = line
    return (l0 * u_tgt[0] + l1 * u_tgt[1] + l2) / np.hypot(l0, l1) / det


def triangulate_rays(
    c_a: np.ndarray, d_a: np.ndarray, c_b: np.ndarray, d_b: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoints of common perpendiculars for batches of ray pairs.

    Directions must be unit length. Returns ``(points, parallax, ok)`` where
    ``ok`` is False for (near-)parallel rays.
    """
    c_a, d_a, c_b, d_b = (np.atleast_2d(v) for v in (c_a, d_a, c_b, d_b))
    w = c_a - c_b
    b = np.sum(d_a * d_b, axis=1)
    d = np.sum(d_a * w, axis=1)
    e = np.sum(d_b * w, axis=1)
    denom = 1.0 - b * b
    ok = denom > 1e-14
    safe = np.where(ok, denom, 1.0)
    s = (b * e - d) / safe
    r = (e - b * d) / safe
    points = 0.5 * ((c_a + s[:, None] * d_a) + (c_b + r[:, None] * d_b))
    parallax = np.arccos(np.clip(b, -1.0, 1.0))
    return points, parallax, ok


def triangulate_midpoint(
    pose_a: Pose,
    pose_b: Pose,
    K: CameraIntrinsics,
    u_a: np.ndarray,
    u_b: np.ndarray,
    min_parallax_deg: float = 1.0,
) -> tuple[np.ndarray, float]:
    """Mid-point triangulation of one correspondence.

    Returns the world point and the ray parallax angle in radians.
    """
    c_a, c_b = pose_a.center(), pose_b.center()
    if np.linalg.norm(c_a - c_b) < 1e-12:
        raise DegenerateGeometryError("identical camera centers")
    d_a = pose_a.R.T @ K.backproject(u_a)
    d_b = pose_b.R.T @ K.backproject(u_b)
    d_a /= np.linalg.norm(d_a)
    d_b /= np.linalg.norm(d_b)
    X, parallax, ok = triangulate_rays(c_a, d_a, c_b, d_b)
    if not ok[0] or parallax[0] < np.deg2rad(min_parallax_deg):
        raise LowParallaxError(f"parallax {np.rad2deg(parallax[0]):.4f} deg below threshold")
    return X[0], float(parallax[0])


# --- Sim(3) ---------------------------------------------------------------


@dataclass(frozen=True)
class Sim3Pose:
    """Similarity ``x -> s R x + t``."""

    R: np.ndarray
    t: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "s", float(self.s))
        if not self.s > 0:
            raise ValueError("similarity scale must be positive")

    @classmethod
    def identity(cls) -> "Sim3Pose":
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_pose(cls, pose: Pose, s: float = 1.0) -> "Sim3Pose":
        return cls(pose.R, pose.t, s)

    def to_pose(self) -> Pose:
        """Rigid pose with the scale absorbed into the translation."""
        return Pose(self.R, self.t / self.s)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Sim3Pose":
        return Sim3Pose(self.R.T, -self.R.T @ self.t / self.s, 1.0 / self.s)

    def __matmul__(self, other: "Sim3Pose") -> "Sim3Pose":
        return Sim3Pose(self.R @ other.R, self.s * self.R @ other.t + self.t, self.s * other.s)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.s * (X @ self.R.T) + self.t


def _sim3_W(phi: np.ndarray, sigma: float) -> np.ndarray:
    """Integral of ``exp(s*(hat(phi) + sigma*I))`` over s in [0, 1]."""
    theta = float(np.linalg.norm(phi))
    Phi = hat(phi)
    a = _moment(sigma, 0)
    if theta < 0.1:
        # sin/cos power series; closed forms cancel badly for small theta
        b = c = 0.0
        t2k = 1.0
        fact = 1.0
        for k in range(6):
            fact_b = fact * (2 * k + 1)
            fact_c = fact_b * (2 * k + 2)
            sign = -1.0 if k % 2 else 1.0
            b += sign * t2k * _moment(sigma, 2 * k + 1) / fact_b
            c += sign * t2k * _moment(sigma, 2 * k + 2) / fact_c
            t2k *= theta * theta
            fact = fact_c
    else:
        es = np.exp(sigma)
        den = sigma * sigma + theta * theta
        int_sin = (es * (sigma * np.sin(theta) - theta * np.cos(theta)) + theta) / den
        int_cos = (es * (sigma * np.cos(theta) + theta * np.sin(theta)) - sigma) / den
        b = int_sin / theta
        c = (a - int_cos) / theta**2
    return a * np.eye(3) + b * Phi + c * Phi @ Phi


def _moment(sigma: float, n: int) -> float:
    """Integral of ``s^n exp(sigma s)`` over [0, 1], by power series."""
    total, term = 0.0, 1.0
    for k in range(80):
        val = term / (n + k + 1)
        total += val
        term *= sigma / (k + 1)
        if abs(term) < 1e-18 * abs(total):
            break
    return total


def exp_sim3(xi: np.ndarray) -> Sim3Pose:
    """Exponential of ``(rho, phi, sigma)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi, sigma = xi[:3], xi[3:6], float(xi[6])
    return Sim3Pose(exp_so3(phi), _sim3_W(phi, sigma) @ rho, np.exp(sigma))


def log_sim3(S: Sim3Pose) -> np.ndarray:
    phi = log_so3(S.R)
    sigma = float(np.log(S.s))
    rho = np.linalg.solve(_sim3_W(phi, sigma), S.t)
    return np.concatenate([rho, phi, [sigma]])


def sim3_hat(xi: np.ndarray) -> np.ndarray:
    m = np.zeros((4, 4))
    m[:3, :3] = hat(xi[3:6]) + xi[6] * np.eye(3)
    m[:3, 3] = xi[:3]
    return m


def sim3_vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[0, 3], m[1, 3], m[2, 3], m[2, 1], m[0, 2], m[1, 0], np.trace(m[:3, :3]) / 3.0])


def sim3_ad(xi: np.ndarray) -> np.ndarray:
    """Matrix of ``eta -> vee([hat(xi), hat(eta)])``."""
    A = sim3_hat(xi)
    out = np.zeros((7, 7))
    for k in range(7):
        e = np.zeros(7)
        e[k] = 1.0
        B = sim3_hat(e)
        out[:, k] = sim3_vee(A @ B - B @ A)
    return out


def sim3_adjoint(S: Sim3Pose) -> np.ndarray:
    """``Ad_S`` with ``S exp(eta) S^-1 = exp(Ad_S eta)``."""
    M = S.matrix()
    Mi = S.inverse().matrix()
    out = np.zeros((7, 7))
    for k in range(7):
        e = np.zeros(7)
        e[k] = 1.0
        out[:, k] = sim3_vee(M @ sim3_hat(e) @ Mi)
    return out


def sim3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """``sum_n ad^n / (n+1)!`` evaluated through an augmented matrix exponential."""
    from scipy.linalg import expm

    aug = np.zeros((14, 14))
    aug[:7, :7] = sim3_ad(xi)
    aug[:7, 7:] = np.eye(7)
    return expm(aug)[:7, 7:]
