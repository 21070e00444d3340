"""Rigid-body and projective primitives.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)`` with ``w >= 0``;
* twists (6-vectors) are ordered ``(rho, phi)``: translational part first,
  rotation vector second, so that ``exp_se3(log_se3(T)) == T``;
* a pose ``T`` maps body coordinates into the world frame,
  ``p_world = R @ p_body + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateConfiguration, DegenerateProjection, UnitMismatch

_EPS_PROJ = 1e-12
_SERIES_ANGLE = 0.05


class Unit(str, Enum):
    PIXEL = "pixel"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class Point2:
    u: float
    v: float
    unit: Unit = Unit.PIXEL

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"non-finite point ({self.u}, {self.v})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])

    def distance(self, other: Point2) -> float:
        if self.unit != other.unit:
            raise UnitMismatch(f"cannot mix {self.unit.value} and {other.unit.value} points")
        return math.hypot(self.u - other.u, self.v - other.v)


# ---------------------------------------------------------------------------
# Homography


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map stored with ``h9 == 1``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise DegenerateConfiguration("homography has non-finite entries")
        if abs(m[2, 2]) < _EPS_PROJ:
            raise DegenerateConfiguration(
                "|h9| < 1e-12; rescale by the Frobenius norm before normalizing"
            )
        m = m / m[2, 2]
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateConfiguration("homography is not invertible")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def from_params(cls, h) -> Homography:
        """Build from the nine row-major entries h1..h9 (any nonzero scale)."""
        return cls(np.asarray(h, dtype=float).reshape(3, 3))

    @property
    def params(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.matrix.ravel())

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of points; raises on a vanishing denominator."""
        pts = np.asarray(points, dtype=float)
        h = self.matrix
        u, v = pts[..., 0], pts[..., 1]
        den = h[2, 0] * u + h[2, 1] * v + h[2, 2]
        if np.any(np.abs(den) < _EPS_PROJ):
            raise DegenerateProjection("point maps to the line at infinity")
        out = np.empty_like(pts)
        out[..., 0] = (h[0, 0] * u + h[0, 1] * v + h[0, 2]) / den
        out[..., 1] = (h[1, 0] * u + h[1, 1] * v + h[1, 2]) / den
        return out

    def __eq__(self, other):
        if not isinstance(other, Homography):
            return NotImplemented
        return bool(np.array_equal(self.matrix, other.matrix))

    def __hash__(self):
        return hash(self.params)


def apply_homography(H: Homography, p: Point2) -> Point2:
    u2, v2 = H.apply(np.array([p.u, p.v]))
    return Point2(float(u2), float(v2), p.unit)


# ---------------------------------------------------------------------------
# Rotations


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError(f"invalid quaternion {q}")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(q)


def so3_exp_quat(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    half = 0.5 * theta
    if theta < 1e-8:
        k = 0.5 - theta * theta / 48.0
    else:
        k = math.sin(half) / theta
    return canonical_quat([math.cos(half), *(k * phi)])


def so3_log_quat(q) -> np.ndarray:
    q = canonical_quat(q)
    w, v = q[0], q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-10:
        return 2.0 * v / w
    theta = 2.0 * math.atan2(s, w)
    return (theta / s) * v


def so3_exp(phi) -> np.ndarray:
    """Rotation matrix from a rotation vector (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    return so3_log_quat(matrix_to_quat(R))


def rotation_angle(q) -> float:
    """Angle in [0, pi] of the rotation represented by quaternion ``q``."""
    q = np.asarray(q, dtype=float)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - math.cos(theta)) / theta**2
        b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = 1.0 / theta**2 - 1.0 / (2.0 * theta * math.tan(0.5 * theta))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def _se3_q_matrix(rho, phi) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    P, Rh = hat(phi), hat(rho)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_q_matrix(rho, phi)
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ _se3_q_matrix(rho, phi) @ Ji
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(R, t) -> np.ndarray:
    """Adjoint of (R, t) acting on (rho, phi) twists."""
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = hat(t) @ R
    return out


# ---------------------------------------------------------------------------
# Poses


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        q = canonical_quat(self.rotation)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> PoseSE3:
        return cls(timestamp=timestamp)

    @classmethod
    def from_rt(cls, R, t, timestamp: float = 0.0) -> PoseSE3:
        return cls(matrix_to_quat(R), t, timestamp)

    @classmethod
    def from_matrix(cls, T, timestamp: float = 0.0) -> PoseSE3:
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3], timestamp)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def with_timestamp(self, timestamp: float) -> PoseSE3:
        return PoseSE3(self.rotation, self.translation, timestamp)

    def transform_points(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.R.T + self.translation

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.timestamp == other.timestamp
        )

    def __hash__(self):
        return hash((tuple(self.rotation), tuple(self.translation), self.timestamp))

    def __repr__(self):
        q = ", ".join(f"{x:.6g}" for x in self.rotation)
        t = ", ".join(f"{x:.6g}" for x in self.translation)
        return f"PoseSE3(q=({q}), t=({t}), stamp={self.timestamp!r})"


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a ∘ b``; the result carries ``b``'s timestamp."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.translation + quat_to_matrix(a.rotation) @ b.translation
    return PoseSE3(q, t, b.timestamp)


def inverse(a: PoseSE3) -> PoseSE3:
    qc = a.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    t = -(quat_to_matrix(qc) @ a.translation)
    return PoseSE3(qc, t, a.timestamp)


def log_se3(a: PoseSE3) -> np.ndarray:
    phi = so3_log_quat(a.rotation)
    rho = so3_left_jacobian_inv(phi) @ a.translation
    return np.concatenate([rho, phi])


def exp_se3(xi, timestamp: float = 0.0) -> PoseSE3:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return PoseSE3(so3_exp_quat(phi), so3_left_jacobian(phi) @ rho, timestamp)


def pose_distance(a: PoseSE3, b: PoseSE3) -> float:
    """Max-abs discrepancy between canonical quaternion and translation entries."""
    return float(max(
        np.max(np.abs(a.rotation - b.rotation)),
        np.max(np.abs(a.translation - b.translation)),
    ))


def yaw_pose(x: float, y: float, z: float, yaw: float, timestamp: float = 0.0) -> PoseSE3:
    return PoseSE3([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)], [x, y, z], timestamp)


# ---------------------------------------------------------------------------
# Downward-looking camera over a ground plane

_BODY_TO_CAMERA = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class PlanarCamera:
    """Pinhole camera looking straight down at a plane ``plane_distance`` below it.

    Camera axes: x along body x, y along body -y, optical axis along body -z.
    """

    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    plane_distance: float = 5.0

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, pose: PoseSE3, world_points) -> tuple[np.ndarray, np.ndarray]:
        """Pixels of world points and a mask of those in front and inside the image."""
        P = np.asarray(world_points, dtype=float).reshape(-1, 3)
        body = (P - pose.translation) @ pose.R
        cam = body @ _BODY_TO_CAMERA
        z = cam[:, 2]
        front = z > 1e-9
        z = np.where(front, z, 1.0)
        uv = np.column_stack([self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy])
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)
        return uv, inside

    def plane_points(self, pose: PoseSE3, xy) -> np.ndarray:
        """Lift plane (x, y) coordinates to 3-D below ``pose``'s height."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        z = np.full((len(xy), 1), pose.translation[2] - self.plane_distance)
        return np.hstack([xy, z])

    def relative_pose_from_homography(self, H: Homography, normalized: bool = False) -> PoseSE3:
        """Planar-motion relative pose ``T_a^-1 T_b`` from the a->b image homography.

        Assumes both views share height and have zero roll and pitch, in which
        case the homography on the normalized plane is a 2-D rigid motion.
        """
        M = H.matrix
        if not normalized:
            K = self.K()
            M = np.linalg.solve(K, M @ K)
        M = M / M[2, 2]
        U, _, Vt = np.linalg.svd(M[:2, :2])
        Rn = U @ Vt
        if np.linalg.det(Rn) < 0:
            U[:, -1] *= -1
            Rn = U @ Vt
        phi = math.atan2(Rn[1, 0], Rn[0, 0])
        c, s = math.cos(phi), math.sin(phi)
        d = np.array([M[0, 2], -M[1, 2]])
        t = -self.plane_distance * np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
        return yaw_pose(t[0], t[1], 0.0, phi)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped poses stored column-wise; timestamps strictly increase."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not (len(ts) == len(pos) == len(q)):
            raise ValueError("timestamps, positions and quaternions differ in length")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(pos)) and np.all(np.isfinite(q))):
            raise ValueError("non-finite trajectory values")
        norms = np.linalg.norm(q, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero quaternion in trajectory")
        q = q / norms[:, None]
        q[q[:, 0] < 0] *= -1
        for name, arr in (("timestamps", ts), ("positions", pos), ("quaternions", q)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_poses(cls, poses) -> Trajectory:
        poses = list(poses)
        return cls(
            np.array([p.timestamp for p in poses]),
            np.array([p.translation for p in poses]).reshape(-1, 3),
            np.array([p.rotation for p in poses]).reshape(-1, 4),
        )

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i) -> PoseSE3:
        return PoseSE3(self.quaternions[i], self.positions[i], self.timestamps[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def rotations(self) -> np.ndarray:
        """(N, 3, 3) rotation matrices."""
        w, x, y, z = self.quaternions.T
        R = np.empty((len(self), 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - w * z)
        R[:, 0, 2] = 2 * (x * z + w * y)
        R[:, 1, 0] = 2 * (x * y + w * z)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - w * x)
        R[:, 2, 0] = 2 * (x * z - w * y)
        R[:, 2, 1] = 2 * (y * z + w * x)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return R

    def subset(self, indices) -> Trajectory:
        idx = np.asarray(indices, dtype=np.intp)
        return Trajectory(self.timestamps[idx], self.positions[idx], self.quaternions[idx])
