"""Navigation state of the IMU frame with respect to the world frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import Pose3, normalize_rotation, so3_exp, so3_log

STATE_DIM = 15
# tangent layout: [rotation, position, velocity, gyro bias, accel bias]
ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)


def _vec3(x) -> np.ndarray:
    return np.zeros(3) if x is None else np.asarray(x, dtype=float).reshape(3).copy()


@dataclass(eq=False)
class NavState:
    """``(R_WI, p_WI, v_WI, b_g, b_a)``.

    Retraction: ``R <- R Exp(d_rot)``; every other block is additive and
    expressed in the world frame (positions, velocities) or IMU frame (biases).
    """

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.p = _vec3(self.p)
        self.v = _vec3(self.v)
        self.bg = _vec3(self.bg)
        self.ba = _vec3(self.ba)

    @property
    def pose(self) -> Pose3:
        return Pose3(self.R, self.p)

    def copy(self) -> NavState:
        return NavState(self.R.copy(), self.p, self.v, self.bg, self.ba)

    def with_pose(self, pose: Pose3) -> NavState:
        return NavState(pose.R, pose.t, self.v, self.bg, self.ba)

    def retract(self, delta: np.ndarray) -> NavState:
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (STATE_DIM,):
            raise ValueError(f"NavState tangent must have shape ({STATE_DIM},), got {delta.shape}")
        return NavState(
            normalize_rotation(self.R @ so3_exp(delta[ROT])),
            self.p + delta[POS],
            self.v + delta[VEL],
            self.bg + delta[BG],
            self.ba + delta[BA],
        )

    def local(self, other: NavState) -> np.ndarray:
        return np.concatenate(
            [so3_log(self.R.T @ other.R), other.p - self.p, other.v - self.v, other.bg - self.bg, other.ba - self.ba]
        )

    def to_vector(self) -> np.ndarray:
        """Flat ``[R (row-major, 9), p, v, bg, ba]``; lossless."""
        return np.concatenate([self.R.ravel(), self.p, self.v, self.bg, self.ba])

    @staticmethod
    def from_vector(x: np.ndarray) -> NavState:
        x = np.asarray(x, dtype=float)
        return NavState(x[:9].reshape(3, 3), x[9:12], x[12:15], x[15:18], x[18:21])

    def __repr__(self) -> str:
        return (
            f"NavState(rotvec={so3_log(self.R).round(5).tolist()}, p={self.p.round(5).tolist()}, "
            f"v={self.v.round(5).tolist()}, bg={self.bg.round(6).tolist()}, ba={self.ba.round(6).tolist()})"
        )
