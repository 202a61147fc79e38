"""Plane and rigid-transform primitives.

Planes use the convention ``n . x + d = 0`` with a unit normal ``n`` (Hesse
normal form).  Rigid transforms map coordinates from a source frame into a
target frame: ``q_target = R @ q_source + p``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePlane, GimbalWarning

PLANE_NORM_EPS = 1e-9
TILT_WARN_RAD = 0.2

# Renormalising an already-unit vector can perturb its last bits; skipping the
# division inside this band keeps canonicalisation exactly idempotent.
_UNIT_BAND = 1e-14


def wrap_angle(theta: float) -> float:
    """Wrap ``theta`` into the half-open interval (-pi, pi]."""
    a = math.remainder(float(theta), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True, eq=False)
class PlaneHNF:
    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(3)
        n.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", float(self.d))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.n[0], self.n[1], self.n[2], self.d])

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.n + self.d

    def project(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts - np.outer(self.signed_distance(pts), self.n).reshape(pts.shape)

    def flipped(self) -> "PlaneHNF":
        # + 0.0 turns -0.0 into 0.0
        return PlaneHNF(-self.n + 0.0, -self.d + 0.0)

    def __eq__(self, other):
        if not isinstance(other, PlaneHNF):
            return NotImplemented
        return bool(np.array_equal(self.n, other.n)) and self.d == other.d

    def __hash__(self):
        return hash((tuple(self.n.tolist()), self.d))

    def __repr__(self):
        nx, ny, nz = self.n
        return f"PlaneHNF(n=({nx:.6g}, {ny:.6g}, {nz:.6g}), d={self.d:.6g})"


def plane_from_vector(v, normalize: bool = True) -> PlaneHNF:
    """Build a plane from a raw 4-vector without touching its sign."""
    v = np.asarray(v, dtype=float).reshape(4)
    norm = float(np.linalg.norm(v[:3]))
    if norm <= PLANE_NORM_EPS:
        raise DegeneratePlane(f"normal magnitude {norm:.3g} is below {PLANE_NORM_EPS}")
    if normalize and abs(norm - 1.0) > _UNIT_BAND:
        v = v / norm
    return PlaneHNF(v[:3], v[3])


def canonicalize_plane(raw) -> PlaneHNF:
    """Normalise a raw ``(a, b, c, d)`` plane and fix its sign for a sensor frame.

    The normal is scaled to unit length and flipped so that its z component is
    negative.  When ``n_z`` is exactly zero the first non-zero of ``(n_x, n_y)``
    is made negative instead.
    """
    plane = plane_from_vector(raw)
    n = plane.n
    if n[2] > 0.0:
        flip = True
    elif n[2] < 0.0:
        flip = False
    else:
        lead = n[0] if n[0] != 0.0 else n[1]
        flip = lead > 0.0
    return plane.flipped() if flip else plane


@dataclass(frozen=True, eq=False)
class Pose3:
    R: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        p = np.array(self.p, dtype=float).reshape(3)
        R.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p", p)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_xyz_ypr(cls, x=0.0, y=0.0, z=0.0, yaw=0.0, pitch=0.0, roll=0.0) -> "Pose3":
        return cls(euler_zyx(yaw, pitch, roll), [x, y, z])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.R @ other.R, self.R @ other.p + self.p)

    __matmul__ = compose

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        return Pose3(Rt, -Rt @ self.p)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.p

    def __repr__(self):
        yaw, pitch, roll = yaw_pitch_roll(self.R)
        x, y, z = self.p
        return (
            f"Pose3(p=({x:.6g}, {y:.6g}, {z:.6g}), "
            f"ypr=({yaw:.6g}, {pitch:.6g}, {roll:.6g}))"
        )


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, v) -> "Pose2":
        return cls(v[0], v[1], v[2])

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    __matmul__ = compose

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        c, s = math.cos(self.theta), math.sin(self.theta)
        R = np.array([[c, -s], [s, c]])
        return pts @ R.T + self.translation


def compose(a, b):
    return a.compose(b)


def invert(t):
    return t.inverse()


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def yaw_pitch_roll(R) -> tuple[float, float, float]:
    """ZYX Euler angles of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    sp = -R[2, 0]
    cp = math.sqrt(max(0.0, 1.0 - sp * sp))
    pitch = math.atan2(sp, cp)
    if cp > 1e-9:
        yaw = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
    else:
        yaw = math.atan2(-R[0, 1], R[1, 1])
        roll = 0.0
    return yaw, pitch, roll


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (float(np.trace(R)) - 1.0) * 0.5
    return math.acos(min(1.0, max(-1.0, c)))


def transform_plane(T: Pose3, plane: PlaneHNF) -> PlaneHNF:
    """Express ``plane`` in the target frame of ``T``.

    Equivalent to applying ``(T^-1)^t`` to the homogeneous plane vector.  The
    result is re-normalised but its sign is left alone.
    """
    n = T.R @ plane.n
    d = plane.d - float(T.p @ n)
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > _UNIT_BAND:
        n = n / norm
        d = d / norm
    return PlaneHNF(n, d)


def project_se2(T: Pose3) -> Pose2:
    """Drop a 3D pose onto the ground plane (x, y, yaw).

    Emits :class:`GimbalWarning` when roll or pitch exceed 0.2 rad, since the
    planar projection then discards real motion.
    """
    yaw, pitch, roll = yaw_pitch_roll(T.R)
    if abs(pitch) > TILT_WARN_RAD or abs(roll) > TILT_WARN_RAD:
        warnings.warn(
            f"non-planar pose (pitch={pitch:.3f}, roll={roll:.3f}) projected to SE(2)",
            GimbalWarning,
            stacklevel=2,
        )
    return Pose2(T.p[0], T.p[1], yaw)


def lift_se2(pose: Pose2, z: float = 0.0) -> Pose3:
    return Pose3(rot_z(pose.theta), [pose.x, pose.y, z])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (QR of a Gaussian matrix)."""
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_pose3(rng: np.random.Generator, scale: float = 1.0) -> Pose3:
    return Pose3(random_rotation(rng), rng.uniform(-scale, scale, 3))


def plane_basis(n) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in-plane axes ``(e1, e2)`` with ``e1 x e2 = n``."""
    n = np.asarray(n, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    e1 = np.cross(axis, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def plane_angle(a: PlaneHNF, b: PlaneHNF) -> float:
    """Angle between two oriented plane normals, in radians."""
    return math.acos(min(1.0, max(-1.0, float(a.n @ b.n))))


def se2_compose_jacobians(a: Pose2, b: Pose2) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of ``a.compose(b)`` with respect to ``a`` and ``b`` (x, y, theta)."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    ja = np.array(
        [
            [1.0, 0.0, -s * b.x - c * b.y],
            [0.0, 1.0, c * b.x - s * b.y],
            [0.0, 0.0, 1.0],
        ]
    )
    jb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


def compose_with_covariance(a: Pose2, cov_a, b: Pose2, cov_b):
    """First-order propagation of independent covariances through composition."""
    ja, jb = se2_compose_jacobians(a, b)
    cov = ja @ np.asarray(cov_a) @ ja.T + jb @ np.asarray(cov_b) @ jb.T
    return a.compose(b), 0.5 * (cov + cov.T)
