"""Deterministic ground truth and sensor synthesis (IMU, dual-antenna GNSS, lidar odometry).

Noise comes from counter-based Philox streams keyed by ``(seed, stream id)``;
row ``k`` of a stream belongs to sample ``k`` of that sensor, so removing or
altering one measurement never shifts the noise of another.

Log format, one CSV per stream (GNSS ``sxx, syy, szz`` are variances in m^2)::

    imu.csv:   t,ax,ay,az,gx,gy,gz
    gnss.csv:  t,ant,x,y,z,sxx,syy,szz
    lidar.csv: t,x,y,z,qx,qy,qz,qw
    truth.csv: t,x,y,z,qx,qy,qz,qw,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, RotationSpline

from .config import ConfigError, Extrinsics, load_yaml
from .manifold import Pose3, quat_from_rot, rot_from_quat, rot_z, se3_exp
from .measurements import GnssFix, LidarPose, MeasurementEvent, event_order
from .preintegration import ImuBias, ImuNoiseSpec, ImuSample

GRAVITY = np.array([0.0, 0.0, -9.81])

@dataclass(frozen=True, eq=False)
class GroundTruthSample:
    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    bias: ImuBias

    @property
    def pose(self) -> Pose3:
        return Pose3(rot_from_quat(self.q), self.p)


@dataclass
class Streams:
    truth: list[GroundTruthSample] = field(default_factory=list)
    imu: list[ImuSample] = field(default_factory=list)
    gnss: list[GnssFix] = field(default_factory=list)
    lidar: list[LidarPose] = field(default_factory=list)

    def events(self) -> list[MeasurementEvent]:
        ev: list[MeasurementEvent] = [*self.imu, *self.gnss, *self.lidar]
        ev.sort(key=event_order)
        return ev


# --------------------------------------------------------------------------- trajectories


@dataclass
class Kinematics:
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray  # world-frame acceleration
    w: np.ndarray  # body-frame angular rate


class Trajectory:
    duration: float

    def at(self, t: float) -> Kinematics:
        raise NotImplementedError


@dataclass
class StaticTrajectory(Trajectory):
    duration: float
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def at(self, t):
        z = np.zeros(3)
        return Kinematics(rot_z(self.yaw), np.asarray(self.position, dtype=float), z, z, z)


@dataclass
class CircleTrajectory(Trajectory):
    """Counter-clockwise circle in the horizontal plane, heading along the
    tangent. Optional static prefix, then a smooth (raised-cosine) speed ramp."""

    duration: float
    radius: float
    speed: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    static_prefix: float = 0.0
    ramp: float = 0.0

    def _profile(self, t: float) -> tuple[float, float, float]:
        tau = t - self.static_prefix
        V, T = self.speed, self.ramp
        if tau < 0:
            return 0.0, 0.0, 0.0
        if tau < T:
            x = math.pi * tau / T
            return V / 2 * (tau - T / math.pi * math.sin(x)), V / 2 * (1 - math.cos(x)), V * math.pi / (2 * T) * math.sin(x)
        return V * T / 2 + V * (tau - T), V, 0.0

    def at(self, t):
        s, v, acc_t = self._profile(t)
        r = self.radius
        th = s / r
        c, sn = math.cos(th), math.sin(th)
        tangent = np.array([-sn, c, 0.0])
        inward = np.array([-c, -sn, 0.0])
        return Kinematics(
            rot_z(th + math.pi / 2),
            np.asarray(self.center, dtype=float) + r * np.array([c, sn, 0.0]),
            v * tangent,
            acc_t * tangent + (v * v / r) * inward,
            np.array([0.0, 0.0, v / r]),
        )


class WaypointTrajectory(Trajectory):
    """Cubic-spline positions (zero end velocities) and a rotation spline."""

    def __init__(self, times: Sequence[float], positions: Sequence, rotvecs: Sequence, duration: float | None = None):
        self.times = np.asarray(times, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ConfigError("waypoint times must be strictly increasing with at least two entries")
        self._pos = CubicSpline(self.times, np.asarray(positions, dtype=float), bc_type="clamped")
        self._rot = RotationSpline(self.times, Rotation.from_rotvec(np.asarray(rotvecs, dtype=float)))
        self.duration = float(duration if duration is not None else self.times[-1])

    def at(self, t):
        t = min(max(t, self.times[0]), self.times[-1])
        return Kinematics(
            self._rot(t).as_matrix(),
            self._pos(t),
            self._pos(t, 1),
            self._pos(t, 2),
            self._rot(t, 1),
        )


@dataclass
class TrajectorySpec:
    kind: str = "static"
    duration: float = 10.0
    params: dict[str, Any] = field(default_factory=dict)

    def build(self) -> Trajectory:
        if not self.duration > 0:
            raise ConfigError("trajectory duration must be > 0")
        p = dict(self.params)
        kind = self.kind.lower()
        try:
            if kind == "static":
                return StaticTrajectory(self.duration, np.asarray(p.get("position", [0, 0, 0]), float), float(p.get("yaw", 0.0)))
            if kind == "circle":
                if not float(p.get("radius", 0)) > 0:
                    raise ConfigError("circle radius must be > 0")
                return CircleTrajectory(
                    self.duration,
                    float(p["radius"]),
                    float(p.get("speed", 1.0)),
                    np.asarray(p.get("center", [0, 0, 0]), float),
                    float(p.get("static_prefix", 0.0)),
                    float(p.get("ramp", 0.0)),
                )
            if kind == "waypoints":
                wps = p["waypoints"]
                return WaypointTrajectory(
                    [w["t"] for w in wps],
                    [w["position"] for w in wps],
                    [w.get("rotvec", [0, 0, 0]) for w in wps],
                    self.duration,
                )
        except KeyError as exc:
            raise ConfigError(f"trajectory '{kind}' missing parameter {exc}") from exc
        raise ConfigError(f"unknown trajectory kind {self.kind!r}")


# --------------------------------------------------------------------------- scenario


@dataclass
class Outage:
    t_start: float
    t_end: float
    mode: str = "dropout"  # or "inflation"
    factor: float = 100.0  # covariance multiplier for "inflation"


@dataclass
class ScenarioSpec:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu_rate: float = 100.0
    gnss_rate: float = 20.0
    lidar_rate: float = 5.0
    imu_noise: ImuNoiseSpec | None = field(default_factory=ImuNoiseSpec)
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gnss_sigma: float = 0.02
    lidar_drift_trans: float = 0.005  # m per m travelled (std of per-step perturbation)
    lidar_drift_rot: float = math.radians(0.1)  # rad per m travelled
    outages: list[Outage] = field(default_factory=list)
    gnss_spikes: list[tuple[float, np.ndarray]] = field(default_factory=list)
    seed: int = 0
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    acceptance: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if min(self.imu_rate, self.gnss_rate, self.lidar_rate) <= 0:
            raise ConfigError("sensor rates must be positive")
        if self.gnss_sigma < 0 or self.lidar_drift_trans < 0 or self.lidar_drift_rot < 0:
            raise ConfigError("noise magnitudes must be non-negative")
        if not self.trajectory.duration > 0:
            raise ConfigError("trajectory duration must be > 0")
        for o in self.outages:
            if not (0 <= o.t_start < o.t_end <= self.trajectory.duration):
                raise ConfigError(f"outage [{o.t_start}, {o.t_end}] outside scenario duration")
            if o.mode not in ("dropout", "inflation"):
                raise ConfigError(f"unknown outage mode {o.mode!r}")
            if o.mode == "inflation" and not o.factor >= 1:
                raise ConfigError("inflation factor must be >= 1")

    @property
    def duration(self) -> float:
        return self.trajectory.duration

    @staticmethod
    def from_dict(d: dict) -> ScenarioSpec:
        d = dict(d or {})
        known = {
            "trajectory", "rates", "imu_noise", "imu_bias", "gnss_sigma", "lidar_drift", "outages",
            "gnss_spikes", "seed", "extrinsics", "gravity", "acceptance",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {sorted(unknown)}")
        tr = dict(d.get("trajectory") or {})
        spec = ScenarioSpec(
            trajectory=TrajectorySpec(
                tr.pop("kind", "static"), float(tr.pop("duration", 10.0)), tr
            )
        )
        rates = d.get("rates") or {}
        spec.imu_rate = float(rates.get("imu", spec.imu_rate))
        spec.gnss_rate = float(rates.get("gnss", spec.gnss_rate))
        spec.lidar_rate = float(rates.get("lidar", spec.lidar_rate))
        if "imu_noise" in d:
            spec.imu_noise = None if d["imu_noise"] in (None, "none", False) else ImuNoiseSpec(**d["imu_noise"])
        bias = d.get("imu_bias") or {}
        spec.gyro_bias = np.asarray(bias.get("gyro", [0, 0, 0]), float)
        spec.accel_bias = np.asarray(bias.get("accel", [0, 0, 0]), float)
        spec.gnss_sigma = float(d.get("gnss_sigma", spec.gnss_sigma))
        drift = d.get("lidar_drift") or {}
        spec.lidar_drift_trans = float(drift.get("trans", spec.lidar_drift_trans))
        if "rot_deg_per_m" in drift:
            spec.lidar_drift_rot = math.radians(float(drift["rot_deg_per_m"]))
        spec.outages = [Outage(float(o["t_start"]), float(o["t_end"]), o.get("mode", "dropout"), float(o.get("factor", 100.0))) for o in d.get("outages") or []]
        spec.gnss_spikes = [(float(s["t"]), np.asarray(s["offset"], float)) for s in d.get("gnss_spikes") or []]
        spec.seed = int(d.get("seed", 0))
        spec.extrinsics = Extrinsics.from_dict(d.get("extrinsics"))
        if "gravity" in d:
            spec.gravity = np.asarray(d["gravity"], float)
        spec.acceptance = {k: float(v) for k, v in (d.get("acceptance") or {}).items()}
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        out = {
            "trajectory": {"kind": self.trajectory.kind, "duration": self.trajectory.duration, **self.trajectory.params},
            "rates": {"imu": self.imu_rate, "gnss": self.gnss_rate, "lidar": self.lidar_rate},
            "imu_noise": None if self.imu_noise is None else vars(self.imu_noise).copy(),
            "imu_bias": {"gyro": self.gyro_bias.tolist(), "accel": self.accel_bias.tolist()},
            "gnss_sigma": self.gnss_sigma,
            "lidar_drift": {"trans": self.lidar_drift_trans, "rot_deg_per_m": math.degrees(self.lidar_drift_rot)},
            "outages": [vars(o).copy() for o in self.outages],
            "gnss_spikes": [{"t": t, "offset": o.tolist()} for t, o in self.gnss_spikes],
            "seed": self.seed,
            "extrinsics": self.extrinsics.to_dict(),
            "gravity": self.gravity.tolist(),
            "acceptance": dict(self.acceptance),
        }
        return out


def load_scenario(path: str | Path) -> ScenarioSpec:
    return ScenarioSpec.from_dict(load_yaml(path))


# --------------------------------------------------------------------------- generation

_STREAM = {"gyro": 1, "accel": 2, "bias_g": 3, "bias_a": 4, "gnss": 10, "lidar_rot": 20, "lidar_trans": 21}


def _normals(seed: int, stream: int, n: int, dim: int = 3) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))
    return gen.standard_normal((n, dim))


def _grid(duration: float, rate: float) -> np.ndarray:
    n = int(math.floor(duration * rate + 1e-9)) + 1
    return np.arange(n) / rate


def generate(spec: ScenarioSpec) -> Streams:
    """Ground truth at IMU rate plus all measurement streams."""
    spec.validate()
    traj = spec.trajectory.build()
    g = np.asarray(spec.gravity, dtype=float)
    seed = spec.seed
    out = Streams()

    # IMU + truth
    t_imu = _grid(spec.duration, spec.imu_rate)
    n = len(t_imu)
    dt = 1.0 / spec.imu_rate
    if spec.imu_noise is not None:
        nz = spec.imu_noise
        wn_g = _normals(seed, _STREAM["gyro"], n) * nz.gyro_noise / math.sqrt(dt)
        wn_a = _normals(seed, _STREAM["accel"], n) * nz.accel_noise / math.sqrt(dt)
        steps_g = _normals(seed, _STREAM["bias_g"], n) * nz.gyro_bias_walk * math.sqrt(dt)
        steps_a = _normals(seed, _STREAM["bias_a"], n) * nz.accel_bias_walk * math.sqrt(dt)
        steps_g[0] = 0.0
        steps_a[0] = 0.0
        bg = spec.gyro_bias + np.cumsum(steps_g, axis=0)
        ba = spec.accel_bias + np.cumsum(steps_a, axis=0)
    else:
        wn_g = wn_a = np.zeros((n, 3))
        bg = np.broadcast_to(spec.gyro_bias, (n, 3))
        ba = np.broadcast_to(spec.accel_bias, (n, 3))
    kin = [traj.at(t) for t in t_imu]
    for k, (t, K) in enumerate(zip(t_imu, kin)):
        f = K.R.T @ (K.a - g)
        out.imu.append(ImuSample(float(t), f + ba[k] + wn_a[k], K.w + bg[k] + wn_g[k]))
        q = quat_from_rot(K.R)
        out.truth.append(GroundTruthSample(float(t), q, K.p.copy(), K.v.copy(), ImuBias(bg[k].copy(), ba[k].copy())))

    # GNSS, both antennas
    ex = spec.extrinsics
    t_gnss = _grid(spec.duration, spec.gnss_rate)
    n_ant = len(ex.antennas)
    noise = _normals(seed, _STREAM["gnss"], len(t_gnss), 3 * n_ant).reshape(-1, n_ant, 3)
    lever = [ex.antenna_in_imu(i) for i in range(n_ant)]
    for k, t in enumerate(t_gnss):
        scale = 1.0
        dropped = False
        for o in spec.outages:
            if o.t_start <= t < o.t_end:
                if o.mode == "dropout":
                    dropped = True
                else:
                    scale = max(scale, o.factor)
        if dropped:
            continue
        K = traj.at(float(t))
        sig = spec.gnss_sigma * math.sqrt(scale)
        pos = np.array([K.p + K.R @ lever[i] + sig * noise[k, i] for i in range(n_ant)])
        for ts, off in spec.gnss_spikes:
            if abs(ts - t) < 0.5 / spec.gnss_rate:
                pos = pos + off
        var = max(sig, 1e-6) ** 2
        cov = np.array([np.eye(3) * var] * n_ant)
        out.gnss.append(GnssFix(float(t), pos, cov))

    # lidar odometry with distance-proportional drift
    t_lidar = _grid(spec.duration, spec.lidar_rate)
    nr = _normals(seed, _STREAM["lidar_rot"], len(t_lidar))
    ntr = _normals(seed, _STREAM["lidar_trans"], len(t_lidar))
    T_IL = ex.T_IL
    prev_true = None
    est = Pose3.identity()
    for k, t in enumerate(t_lidar):
        K = traj.at(float(t))
        T_WL = Pose3(K.R, K.p).compose(T_IL)
        if prev_true is not None:
            rel = prev_true.between(T_WL)
            d = float(np.linalg.norm(rel.t))
            xi = np.concatenate([spec.lidar_drift_rot * d * nr[k], spec.lidar_drift_trans * d * ntr[k]])
            est = est.compose(rel.compose(se3_exp(xi)))
        prev_true = T_WL
        lp = LidarPose.from_pose(float(t), est)
        out.lidar.append(lp)
        est = lp.pose  # keep the chain on the serialised representation
    return out


# --------------------------------------------------------------------------- CSV logs


class LogParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


HEADERS = {
    "imu": ["t", "ax", "ay", "az", "gx", "gy", "gz"],
    "gnss": ["t", "ant", "x", "y", "z", "sxx", "syy", "szz"],
    "lidar": ["t", "x", "y", "z", "qx", "qy", "qz", "qw"],
    "truth": ["t", "x", "y", "z", "qx", "qy", "qz", "qw", "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz"],
}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_log(streams: Streams, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = {
        "imu": ([s.t, *s.acc, *s.gyro] for s in streams.imu),
        "gnss": (
            [f.t, i, *f.positions[i], *np.diag(f.covariances[i])]
            for f in streams.gnss
            for i in range(len(f.positions))
        ),
        "lidar": ([p.t, *p.p, *p.q] for p in streams.lidar),
        "truth": ([s.t, *s.p, *s.q, *s.v, *s.bias.bg, *s.bias.ba] for s in streams.truth),
    }
    for name, it in rows.items():
        with open(d / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADERS[name])
            for row in it:
                w.writerow([str(int(x)) if name == "gnss" and j == 1 else _fmt(x) for j, x in enumerate(row)])


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise LogParseError(path, 1, f"expected header {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise LogParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            try:
                yield line, [float(x) for x in row]
            except ValueError as exc:
                raise LogParseError(path, line, str(exc)) from None


def read_log(directory: str | Path) -> Streams:
    d = Path(directory)
    out = Streams()
    for line, r in _read_rows(d / "imu.csv", HEADERS["imu"]):
        out.imu.append(ImuSample(r[0], r[1:4], r[4:7]))
    by_t: dict[float, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    for line, r in _read_rows(d / "gnss.csv", HEADERS["gnss"]):
        if r[1] != int(r[1]) or r[1] < 0:
            raise LogParseError(d / "gnss.csv", line, f"bad antenna index {r[1]}")
        by_t.setdefault(r[0], []).append((int(r[1]), np.array(r[2:5]), np.diag(r[5:8])))
    for t, ants in by_t.items():
        ants.sort(key=lambda a: a[0])
        out.gnss.append(GnssFix(t, [a[1] for a in ants], [a[2] for a in ants]))
    for line, r in _read_rows(d / "lidar.csv", HEADERS["lidar"]):
        out.lidar.append(LidarPose(r[0], r[4:8], r[1:4]))
    truth_path = d / "truth.csv"
    if truth_path.exists():
        for line, r in _read_rows(truth_path, HEADERS["truth"]):
            out.truth.append(GroundTruthSample(r[0], np.array(r[4:8]), np.array(r[1:4]), np.array(r[8:11]), ImuBias(r[11:14], r[14:17])))
    return out
