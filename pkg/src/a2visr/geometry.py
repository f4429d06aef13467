"""Frames, rigid transforms and quaternion handling.

Rotations are stored as 3x3 matrices. Quaternions only appear at the IMU
boundary and are converted immediately.

Frame tags:

- ``BODY``: aerial robot body frame.
- ``GROUND``: frame attached to the ground vehicle.
- ``GROUND_INITIAL``: initial pose of the ground frame, used as the inertial frame.
- ``GROUND_REFERENCE``: translates with the ground vehicle, keeps the initial orientation.
- ``CAMERA``: camera optical frame (x right, y down, z along the optical axis).
- ``MECHANISM_BASE``: base of the pan/tilt mechanism.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
REPAIR_TOL = 1e-6


class FrameError(ValueError):
    """Raised when transforms with incompatible frames are combined."""


class FrameId(enum.Enum):
    BODY = "B"
    GROUND = "G"
    GROUND_INITIAL = "G0"
    GROUND_REFERENCE = "G'"
    CAMERA = "C"
    MECHANISM_BASE = "M"


@dataclass(frozen=True)
class UnitQuaternion:
    """Hamilton quaternion ``[w, x, y, z]``.

    Construction normalizes the components. A norm that was off by more than
    ``ORTHO_TOL`` is recorded in ``renormalized`` so callers can surface it.
    """

    w: float
    x: float
    y: float
    z: float
    renormalized: bool = field(default=False, compare=False)

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=float)
        n = float(np.linalg.norm(q))
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion has zero or non-finite norm")
        if abs(n - 1.0) > ORTHO_TOL:
            log.debug("normalizing quaternion with norm %.12g", n)
            q = q / n
            object.__setattr__(self, "w", float(q[0]))
            object.__setattr__(self, "x", float(q[1]))
            object.__setattr__(self, "y", float(q[2]))
            object.__setattr__(self, "z", float(q[3]))
            object.__setattr__(self, "renormalized", True)

    @classmethod
    def identity(cls) -> UnitQuaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> UnitQuaternion:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = np.sin(0.5 * angle)
        return cls(float(np.cos(0.5 * angle)), *(float(c) for c in s * axis))

    @classmethod
    def from_vector_part(cls, xyz) -> UnitQuaternion:
        """Rebuild a quaternion from its vector part, taking ``w >= 0``."""
        x, y, z = (float(c) for c in xyz)
        w = float(np.sqrt(max(0.0, 1.0 - (x * x + y * y + z * z))))
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def canonical(self) -> UnitQuaternion:
        """Same rotation with non-negative scalar part."""
        if self.w < 0:
            return UnitQuaternion(-self.w, -self.x, -self.y, -self.z)
        return self


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product of two ``[w, x, y, z]`` arrays."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_rotation(q: UnitQuaternion) -> np.ndarray:
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R) -> UnitQuaternion:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return UnitQuaternion(*q).canonical()


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * (K @ K)


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    """Validate a rotation matrix, repairing small drift.

    Inputs within ``REPAIR_TOL`` of SO(3) are projected onto the nearest
    rotation; anything further off is rejected.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    err = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    if err <= tol:
        return R
    if err > REPAIR_TOL:
        raise ValueError(f"matrix is not a rotation (orthonormality error {err:.3g})")
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class PoseTransform:
    """Rigid transform mapping coordinates in ``source`` to ``target``.

    ``apply(p) = rotation @ p + translation``; in the usual left
    super/subscript notation this is ``^target_source T``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    source: FrameId
    target: FrameId

    def __post_init__(self):
        R = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R = R.copy()
        t = t.copy()
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, source: FrameId, target: FrameId) -> PoseTransform:
        return cls(np.eye(3), np.zeros(3), source, target)

    def apply(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def inverse(self) -> PoseTransform:
        return inverse(self)

    def __matmul__(self, other: PoseTransform) -> PoseTransform:
        return compose(self, other)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def allclose(self, other: PoseTransform, atol: float = 1e-12) -> bool:
        return (
            self.source == other.source
            and self.target == other.target
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        return (
            f"PoseTransform({self.source.value}->{self.target.value}, "
            f"t={np.array2string(self.translation, precision=4)})"
        )


def compose(a: PoseTransform, b: PoseTransform) -> PoseTransform:
    """``a @ b``: apply ``b`` first, then ``a``."""
    if a.source != b.target:
        raise FrameError(
            f"cannot compose {a.source.value}->{a.target.value} after "
            f"{b.source.value}->{b.target.value}: inner frames differ"
        )
    return PoseTransform(
        a.rotation @ b.rotation,
        a.rotation @ b.translation + a.translation,
        b.source,
        a.target,
    )


def inverse(t: PoseTransform) -> PoseTransform:
    Rt = t.rotation.T
    return PoseTransform(Rt, -Rt @ t.translation, t.target, t.source)


def to_reference_frame(p_body, p_reference) -> np.ndarray:
    """Position of the body relative to the ground reference frame.

    Both inputs are expressed in the initial ground frame. The reference
    frame only translates, so the rotation between them is the identity and
    the result is a plain difference.
    """
    return np.asarray(p_body, dtype=float) - np.asarray(p_reference, dtype=float)
