"""Sensor measurement records shared by the simulator and the estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .manifold import Pose3, quat_from_rot, rot_from_quat
from .preintegration import ImuSample


@dataclass(frozen=True, eq=False)
class GnssFix:
    """Antenna fixes at one epoch; row ``i`` of ``positions`` is antenna ``i``
    (0 = left), ``covariances`` are per-antenna 3x3 (m^2)."""

    t: float
    positions: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        cov = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if len(pos) != len(cov):
            raise ValueError("one covariance per antenna required")
        if not (np.isfinite(self.t) and np.isfinite(pos).all() and np.isfinite(cov).all()):
            raise ValueError("GNSS fix must be finite")
        if any(np.linalg.eigvalsh(0.5 * (c + c.T)).min() < 0 for c in cov):
            raise ValueError("GNSS covariance must be positive semi-definite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "covariances", cov)

    def position(self, ant: int = 0) -> np.ndarray:
        return self.positions[ant]

    def covariance(self, ant: int = 0) -> np.ndarray:
        return self.covariances[ant]


@dataclass(frozen=True, eq=False)
class LidarPose:
    """Lidar odometry output ``T_L0Lk`` as quaternion ``[qx,qy,qz,qw]`` plus translation."""

    t: float
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(4))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        if not (np.isfinite(self.t) and np.isfinite(self.q).all() and np.isfinite(self.p).all()):
            raise ValueError("lidar pose must be finite")

    @staticmethod
    def from_pose(t: float, pose: Pose3) -> LidarPose:
        return LidarPose(t, quat_from_rot(pose.R), pose.t)

    @property
    def pose(self) -> Pose3:
        return Pose3(rot_from_quat(self.q), self.p)


MeasurementEvent = Union[ImuSample, GnssFix, LidarPose]

_PRIORITY = {ImuSample: 0, GnssFix: 1, LidarPose: 2}


def event_order(e: MeasurementEvent) -> tuple[float, int]:
    """Timestamp order; at equal stamps IMU comes first so its node exists."""
    return (e.t, _PRIORITY[type(e)])
