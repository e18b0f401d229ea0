"""Rigid poses and small rotation helpers.

Quaternions are stored scalar-last ``(qx, qy, qz, qw)`` throughout, matching
the IMU feature layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

QUAT_TOL = 1e-6


def _as_vec(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have {n} components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class Pose:
    """Position in meters plus a unit orientation quaternion (x, y, z, w)."""

    position: np.ndarray
    orientation: np.ndarray

    def __init__(self, position=(0.0, 0.0, 0.0), orientation=(0.0, 0.0, 0.0, 1.0)):
        pos = _as_vec(position, 3, "position")
        quat = _as_vec(orientation, 4, "orientation")
        if abs(np.linalg.norm(quat) - 1.0) > QUAT_TOL:
            raise ValueError(f"quaternion norm {np.linalg.norm(quat):.9f} is not 1")
        pos.setflags(write=False)
        quat.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> Pose:
        quat = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat(canonical=True)
        return cls(translation, quat / np.linalg.norm(quat))

    @classmethod
    def from_xyz_rpy(cls, x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0) -> Pose:
        """Build from position and intrinsic-z-y-x (yaw, pitch, roll) angles in radians."""
        quat = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_quat(canonical=True)
        return cls((x, y, z), quat / np.linalg.norm(quat))

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.orientation).as_matrix()

    @property
    def yaw(self) -> float:
        r = self.rotation
        return float(np.arctan2(r[1, 0], r[0, 0]))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    def inverse(self) -> Pose:
        rot_t = self.rotation.T
        return Pose.from_matrix(rot_t, -rot_t @ self.position)

    def compose(self, other: Pose) -> Pose:
        """Return ``self * other`` (apply ``other`` first, then ``self``)."""
        r = self.rotation
        return Pose.from_matrix(r @ other.rotation, r @ other.position + self.position)

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.position

    def heading_frame(self) -> Pose:
        """Same position, gravity-aligned orientation keeping only the yaw."""
        return Pose.from_xyz_rpy(*self.position, yaw=self.yaw)

    def rpy(self) -> tuple[float, float, float]:
        yaw, pitch, roll = Rotation.from_quat(self.orientation).as_euler("ZYX")
        return float(roll), float(pitch), float(yaw)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.position, other.position)
            and np.array_equal(self.orientation, other.orientation)
        )

    def __hash__(self) -> int:
        return hash((self.position.tobytes(), self.orientation.tobytes()))

    def to_list(self) -> list[float]:
        return [float(v) for v in (*self.position, *self.orientation)]

    @classmethod
    def from_list(cls, values) -> Pose:
        vals = list(values)
        if len(vals) != 7:
            raise ValueError(f"pose needs 7 values, got {len(vals)}")
        return cls(vals[:3], vals[3:])


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, in degrees."""
    rel = Rotation.from_matrix(a.rotation.T @ b.rotation)
    return float(np.degrees(rel.magnitude()))
