"""Estimator configuration and its YAML key/value file format.

Every key with its unit (defaults in brackets)::

    gravity: [0, 0, -9.81]            # m/s^2, world frame
    imu:
      gyro_noise: 1.7e-4              # rad/s/sqrt(Hz)
      accel_noise: 2.0e-3             # m/s^2/sqrt(Hz)
      gyro_bias_walk: 1.0e-5          # rad/s^2/sqrt(Hz)
      accel_bias_walk: 1.0e-4         # m/s^3/sqrt(Hz)
      integration_noise: 1.0e-4       # m/sqrt(s), position random walk
    extrinsics:
      antennas:                       # lever arm p_GI per antenna, m (left first)
        - [0.0, -0.5, -1.0]
        - [0.0, 0.5, -1.0]
      R_IG_rotvec: [0, 0, 0]          # rad, rotation antenna frame -> IMU frame
      T_IL:                           # lidar pose in IMU frame
        translation: [0.3, 0.0, 0.8]  # m
        rotvec: [0.0, 0.0, 0.0]       # rad
    gnss:
      max_std: 0.1                    # m, per-axis std accepted
      max_velocity: 2.0               # m/s implied between accepted fixes
      bad_count: 3                    # consecutive bad fixes -> unhealthy
      good_count: 3                   # consecutive good fixes -> healthy
      timeout: 0.1                    # s without any fix -> unhealthy
    lidar:
      between_sigma_rot: 2.0e-3       # rad
      between_sigma_trans: 1.0e-2     # m
      unary_sigma_rot: 5.0e-3         # rad
      unary_sigma_trans: 2.0e-2       # m
      roll_pitch_inflation: 100.0     # variance factor on roll/pitch
    init:
      duration: 2.0                   # s of static data required
      max_accel_std: 0.05             # m/s^2, motion check
      sigma_rot: 0.01                 # rad, prior roll/pitch std
      sigma_yaw: 0.02                 # rad, floor on prior yaw std
      sigma_vel: 0.01                 # m/s
      sigma_bg: 1.0e-3                # rad/s
      sigma_ba: 5.0e-2                # m/s^2
    smoother:
      horizon: 5.0                    # s
      max_iterations: 10
      lambda_init: 1.0e-4
      rel_tolerance: 1.0e-6
    attach_tolerance: null            # s, default half the IMU period
    imu_buffer: 20.0                  # s of raw IMU kept for re-integration
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .manifold import Pose3, so3_exp, so3_log
from .preintegration import ImuNoiseSpec
from .smoother import SolverConfig


class ConfigError(ValueError):
    pass


@dataclass
class Extrinsics:
    # lever arm p_GI (antenna -> IMU, antenna frame) per antenna; index 0 is the left antenna
    antennas: list[np.ndarray] = field(
        default_factory=lambda: [np.array([0.0, -0.5, -1.0]), np.array([0.0, 0.5, -1.0])]
    )
    R_IG: np.ndarray = field(default_factory=lambda: np.eye(3))
    T_IL: Pose3 = field(default_factory=lambda: Pose3(np.eye(3), np.array([0.3, 0.0, 0.8])))

    def antenna_in_imu(self, i: int) -> np.ndarray:
        """Antenna phase centre expressed in the IMU frame, ``p_IG``."""
        return -self.R_IG @ self.antennas[i]

    def to_dict(self) -> dict:
        return {
            "antennas": [a.tolist() for a in self.antennas],
            "R_IG_rotvec": so3_log(self.R_IG).tolist(),
            "T_IL": {"translation": self.T_IL.t.tolist(), "rotvec": so3_log(self.T_IL.R).tolist()},
        }

    @staticmethod
    def from_dict(d: dict | None) -> Extrinsics:
        ex = Extrinsics()
        if not d:
            return ex
        _reject_unknown(d, {"antennas", "R_IG_rotvec", "T_IL"}, "extrinsics")
        if "antennas" in d:
            ex.antennas = [np.asarray(a, dtype=float).reshape(3) for a in d["antennas"]]
            if not ex.antennas:
                raise ConfigError("extrinsics.antennas must list at least one antenna")
        if "R_IG_rotvec" in d:
            ex.R_IG = so3_exp(np.asarray(d["R_IG_rotvec"], dtype=float))
        if "T_IL" in d:
            til = d["T_IL"]
            ex.T_IL = Pose3(so3_exp(np.asarray(til.get("rotvec", [0, 0, 0]), dtype=float)), til.get("translation", [0, 0, 0]))
        return ex


@dataclass
class GnssHealthConfig:
    max_std: float = 0.1
    max_velocity: float = 2.0
    bad_count: int = 3
    good_count: int = 3
    timeout: float = 0.1

    def __post_init__(self):
        if not (self.max_std > 0 and self.max_velocity > 0 and self.timeout > 0):
            raise ConfigError("gnss thresholds must be positive")
        if self.bad_count < 1 or self.good_count < 1:
            raise ConfigError("gnss streak counts must be >= 1")


@dataclass
class LidarConfig:
    between_sigma_rot: float = 2e-3
    between_sigma_trans: float = 1e-2
    unary_sigma_rot: float = 5e-3
    unary_sigma_trans: float = 2e-2
    roll_pitch_inflation: float = 100.0


@dataclass
class InitConfig:
    duration: float = 2.0
    max_accel_std: float = 0.05
    sigma_rot: float = 0.01
    sigma_yaw: float = 0.02
    sigma_vel: float = 0.01
    sigma_bg: float = 1e-3
    sigma_ba: float = 5e-2


@dataclass
class EstimatorConfig:
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    imu: ImuNoiseSpec = field(default_factory=ImuNoiseSpec)
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    gnss: GnssHealthConfig = field(default_factory=GnssHealthConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    init: InitConfig = field(default_factory=InitConfig)
    smoother: SolverConfig = field(default_factory=SolverConfig)
    attach_tolerance: float | None = None
    imu_buffer: float = 20.0

    def to_dict(self) -> dict:
        return {
            "gravity": self.gravity.tolist(),
            "imu": asdict(self.imu),
            "extrinsics": self.extrinsics.to_dict(),
            "gnss": asdict(self.gnss),
            "lidar": asdict(self.lidar),
            "init": asdict(self.init),
            "smoother": asdict(self.smoother),
            "attach_tolerance": self.attach_tolerance,
            "imu_buffer": self.imu_buffer,
        }

    @staticmethod
    def from_dict(d: dict | None) -> EstimatorConfig:
        d = dict(d or {})
        _reject_unknown(d, {f.name for f in fields(EstimatorConfig)}, "config")
        cfg = EstimatorConfig()
        if "gravity" in d:
            cfg.gravity = np.asarray(d["gravity"], dtype=float).reshape(3)
        cfg.imu = _section(ImuNoiseSpec, d.get("imu"), "imu")
        cfg.extrinsics = Extrinsics.from_dict(d.get("extrinsics"))
        cfg.gnss = _section(GnssHealthConfig, d.get("gnss"), "gnss")
        cfg.lidar = _section(LidarConfig, d.get("lidar"), "lidar")
        cfg.init = _section(InitConfig, d.get("init"), "init")
        cfg.smoother = _section(SolverConfig, d.get("smoother"), "smoother")
        if d.get("attach_tolerance") is not None:
            cfg.attach_tolerance = float(d["attach_tolerance"])
        if "imu_buffer" in d:
            cfg.imu_buffer = float(d["imu_buffer"])
        return cfg


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _section(cls, d: dict | None, where: str):
    if not d:
        return cls()
    _reject_unknown(d, {f.name for f in fields(cls)}, where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_yaml(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path: str | Path | None) -> EstimatorConfig:
    return EstimatorConfig.from_dict(load_yaml(path) if path else None)


def to_plain(obj):
    """Recursively convert numpy / dataclass values into YAML/JSON friendly types."""
    if is_dataclass(obj):
        return {k: to_plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
