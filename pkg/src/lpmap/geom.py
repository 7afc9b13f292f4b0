"""Core geometry: rigid poses, minimal line/plane parameterizations, residuals.

Lines are parameterized by (alpha, beta, x, y): a 2-DoF rotation R(alpha, beta)
maps the canonical z-axis onto the line direction and the in-plane offset (x, y)
onto the line's perpendicular foot. Planes use (alpha, beta, d): the rotated
z-axis is the normal and d the signed offset along it. All conversions,
point-to-line / point-to-plane residuals, and their analytic Jacobians live here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _Rotation

from .errors import SingularDirection

U_X = np.array([1.0, 0.0, 0.0])
U_Y = np.array([0.0, 1.0, 0.0])
U_Z = np.array([0.0, 0.0, 1.0])

# conversions reject directions within this angle cone of ±x (chart singularity)
SINGULARITY_MARGIN = 1e-6


# ---------------------------------------------------------------------------
# rigid poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidPose:
    """SE(3) pose: world point = rotation @ local point + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=float)
        return RigidPose(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector; batched on leading axes."""
    return _Rotation.from_rotvec(np.asarray(omega, dtype=float)).as_matrix()


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix; batched on leading axes."""
    return _Rotation.from_matrix(np.asarray(rot, dtype=float)).as_rotvec()


def se3_log(pose: RigidPose) -> np.ndarray:
    """6-vector (rotation log, raw translation) used by pose residual norms."""
    return np.concatenate([so3_log(pose.rotation), pose.translation])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x; batched on leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3); batched on leading axes.

    Jr^{ -1 }(phi) = I + [phi]x / 2 + c(theta) [phi]x^2 with
    c = 1/theta^2 - (1 + cos theta) / (2 theta sin theta), series 1/12 near 0.
    """
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / np.where(small, 1.0, theta2)
        - (1.0 + np.cos(theta)) / (2.0 * safe * np.where(small, 1.0, np.sin(safe))),
    )
    k = skew(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + c[..., None, None] * (k @ k)


# ---------------------------------------------------------------------------
# minimal parameterizations
# ---------------------------------------------------------------------------


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    w = (a + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return float(w)


@dataclass(frozen=True)
class LineParam:
    """Minimal 4-DoF infinite line block (alpha, beta, x, y)."""

    alpha: float
    beta: float
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.x, self.y])

    def normalized(self) -> "LineParam":
        """Re-chart into alpha in (-pi, pi], beta in (-pi/2, pi/2)."""
        pn = line_to_point_normal(self)
        return point_normal_to_line(pn.normal, pn.point)


@dataclass(frozen=True)
class PlaneParam:
    """Minimal 3-DoF infinite plane block (alpha, beta, d)."""

    alpha: float
    beta: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.d])

    def normalized(self) -> "PlaneParam":
        pn = plane_to_point_normal(self)
        return point_normal_to_plane(pn.normal, pn.offset)


@dataclass(frozen=True)
class PointNormalLine:
    """Line as unit direction plus the point on the line closest to the origin."""

    normal: np.ndarray
    point: np.ndarray


@dataclass(frozen=True)
class PointNormalPlane:
    """Plane {p : normal . p = offset} with unit normal."""

    normal: np.ndarray
    offset: float


def rot2dof(alpha, beta) -> np.ndarray:
    """2-DoF rotation taking the canonical z-axis / xOy plane onto a landmark.

    Accepts scalars or broadcastable arrays; output shape (..., 3, 3).
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    r = np.empty(np.broadcast(alpha, beta).shape + (3, 3))
    r[..., 0, 0] = cb
    r[..., 0, 1] = 0.0
    r[..., 0, 2] = -sb
    r[..., 1, 0] = sa * sb
    r[..., 1, 1] = ca
    r[..., 1, 2] = sa * cb
    r[..., 2, 0] = ca * sb
    r[..., 2, 1] = -sa
    r[..., 2, 2] = ca * cb
    return r


def rot2dof_grad(alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """(dR/dalpha, dR/dbeta) of rot2dof; batched like rot2dof."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    shape = np.broadcast(alpha, beta).shape + (3, 3)
    da = np.zeros(shape)
    da[..., 1, 0] = ca * sb
    da[..., 1, 1] = -sa
    da[..., 1, 2] = ca * cb
    da[..., 2, 0] = -sa * sb
    da[..., 2, 1] = -ca
    da[..., 2, 2] = -sa * cb
    db = np.zeros(shape)
    db[..., 0, 0] = -sb
    db[..., 0, 2] = -cb
    db[..., 1, 0] = sa * cb
    db[..., 1, 2] = -sa * sb
    db[..., 2, 0] = ca * cb
    db[..., 2, 2] = -ca * sb
    return da, db


def line_params_point_normal(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched (alpha, beta, x, y) -> (direction (...,3), foot point (...,3))."""
    params = np.asarray(params, dtype=float)
    r = rot2dof(params[..., 0], params[..., 1])
    n = r[..., :, 2]
    c = r[..., :, 0] * params[..., 2, None] + r[..., :, 1] * params[..., 3, None]
    return n, c


def plane_params_point_normal(params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched (alpha, beta, d) -> (normal (...,3), offset (...,))."""
    params = np.asarray(params, dtype=float)
    r = rot2dof(params[..., 0], params[..., 1])
    return r[..., :, 2], params[..., 2]


def line_to_point_normal(lp: LineParam) -> PointNormalLine:
    n, c = line_params_point_normal(lp.as_array())
    return PointNormalLine(n, c)


def plane_to_point_normal(pp: PlaneParam) -> PointNormalPlane:
    n, d = plane_params_point_normal(pp.as_array())
    return PointNormalPlane(n, float(d))


def canonical_direction(n: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, float]:
    """Sign-normalize a direction: n_z >= 0, ties broken by n_y then n_x.

    Returns (canonical vector, sign applied).
    """
    n = np.asarray(n, dtype=float)
    if abs(n[2]) > eps:
        sign = 1.0 if n[2] > 0 else -1.0
    elif abs(n[1]) > eps:
        sign = 1.0 if n[1] > 0 else -1.0
    else:
        sign = 1.0 if n[0] >= 0 else -1.0
    return n * sign, sign


def _extract_angles(n: np.ndarray) -> tuple[float, float]:
    """(alpha, beta) with R(alpha, beta) @ u_z = n; raises near |n_x| = 1."""
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n)
    if not np.isclose(norm, 1.0, atol=1e-6):
        n = n / norm
    if abs(n[0]) > 1.0 - SINGULARITY_MARGIN:
        raise SingularDirection(f"direction {n} is within the +-x singular cone")
    beta = float(np.arcsin(np.clip(-n[0], -1.0, 1.0)))
    alpha = float(np.arctan2(n[1], n[2]))
    return alpha, beta


def point_normal_to_line(n: np.ndarray, q: np.ndarray) -> LineParam:
    """Inverse of line_to_point_normal; q is any point on the line."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    n, _ = canonical_direction(n)
    alpha, beta = _extract_angles(n)
    q = np.asarray(q, dtype=float)
    c = q - (n @ q) * n
    local = rot2dof(alpha, beta).T @ c
    return LineParam(alpha, beta, float(local[0]), float(local[1]))


def point_normal_to_plane(n: np.ndarray, d: float) -> PlaneParam:
    """Inverse of plane_to_point_normal; flips (n, d) so the normal is canonical."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    n, sign = canonical_direction(n)
    alpha, beta = _extract_angles(n)
    return PlaneParam(alpha, beta, float(d) * sign)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def point_to_line_residual(
    pose: RigidPose, p_local: np.ndarray, line: PointNormalLine
) -> np.ndarray:
    """(I - nn^T)(T p - q): zero iff the transformed point lies on the line."""
    w = pose.transform(p_local)
    u = w - line.point
    n = line.normal
    return u - n * (n @ u)


def point_to_plane_residual(
    pose: RigidPose, p_local: np.ndarray, plane: PointNormalPlane
) -> float:
    """Signed distance n^T (T p) - d of the transformed point to the plane."""
    w = pose.transform(p_local)
    return float(plane.normal @ w - plane.offset)


def line_residual_jacobian(
    pose: RigidPose, p_local: np.ndarray, lp: LineParam
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of the point-to-line residual.

    Returns (3x6 wrt the pose tangent [rotation, translation], 3x4 wrt
    (alpha, beta, x, y)). Pose perturbation is right-multiplied:
    R <- R Exp(w), t <- t + R v.
    """
    if abs(lp.beta) > np.pi / 2 - 1e-4:
        raise SingularDirection("line parameter beta too close to +-pi/2")
    r_mat = rot2dof(lp.alpha, lp.beta)
    n = r_mat[:, 2]
    axis = U_X * lp.x + U_Y * lp.y
    c = r_mat @ axis
    w = pose.transform(p_local)
    u = w - c
    proj = np.eye(3) - np.outer(n, n)

    j_pose = np.zeros((3, 6))
    j_pose[:, :3] = proj @ (-pose.rotation @ skew(p_local))
    j_pose[:, 3:] = proj @ pose.rotation

    da, db = rot2dof_grad(lp.alpha, lp.beta)
    dr_dn = -((n @ u) * np.eye(3) + np.outer(n, u))  # d/dn of (I - nn^T) u
    j_lm = np.zeros((3, 4))
    j_lm[:, 0] = dr_dn @ (da @ U_Z) - proj @ (da @ axis)
    j_lm[:, 1] = dr_dn @ (db @ U_Z) - proj @ (db @ axis)
    j_lm[:, 2] = -proj @ r_mat[:, 0]
    j_lm[:, 3] = -proj @ r_mat[:, 1]
    return j_pose, j_lm


def plane_residual_jacobian(
    pose: RigidPose, p_local: np.ndarray, pp: PlaneParam
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of the point-to-plane residual (1x6, 1x3)."""
    if abs(pp.beta) > np.pi / 2 - 1e-4:
        raise SingularDirection("plane parameter beta too close to +-pi/2")
    r_mat = rot2dof(pp.alpha, pp.beta)
    n = r_mat[:, 2]
    w = pose.transform(p_local)

    j_pose = np.zeros((1, 6))
    j_pose[0, :3] = n @ (-pose.rotation @ skew(p_local))
    j_pose[0, 3:] = n @ pose.rotation

    da, db = rot2dof_grad(pp.alpha, pp.beta)
    j_lm = np.array([[(da @ U_Z) @ w, (db @ U_Z) @ w, -1.0]])
    return j_pose, j_lm


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Unsigned angle between two directions, ignoring sign (0..pi/2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
