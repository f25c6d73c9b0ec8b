"""Runtime estimator: static initialization, high-rate IMU propagation, a
background graph update, and the main/fallback graph pair used to ride out
GNSS outages.

Threading contract. ``ingest_imu`` touches no lock: it reads the most recent
correction posted by the update worker (an atomic reference swap), replays
the buffered IMU samples on top of it and publishes a snapshot. GNSS and lidar
ingestion only validate and enqueue raw events under a short lock; all graph
work happens in :meth:`Estimator.run_update`. With ``realtime=False`` the
caller drives everything from one thread via :meth:`Estimator.run_events`.
"""
from __future__ import annotations

import bisect
import enum
import logging
import math
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import EstimatorConfig
from .factors import (
    GnssFactor,
    ImuFactor,
    LidarBetweenFactor,
    LidarUnaryFactor,
    NoiseModel,
    PriorFactor,
    antenna_to_imu,
    lidar_unary_noise,
    pseudo_global_measurement,
)
from .manifold import Pose3, rot_x, rot_y, rot_z
from .measurements import GnssFix, LidarPose, MeasurementEvent, event_order
from .preintegration import ImuBias, ImuSample, predict, preintegrate, propagate_step
from .smoother import GraphWindow, UnobservableGraphError, optimize, trim_window
from .state import NavState

log = logging.getLogger(__name__)

__all__ = [
    "NavState",
    "FrameBook",
    "Source",
    "ActiveGraph",
    "Frame",
    "EstimatorSnapshot",
    "GnssHealth",
    "GnssStatus",
    "GnssOutcome",
    "InitializationError",
    "initialize_static",
    "world_from_odometry",
    "Estimator",
    "MeasurementEvent",
]


class InitializationError(RuntimeError):
    pass


class Source(str, enum.Enum):
    PROPAGATED = "Propagated"
    OPTIMIZED = "Optimized"


class ActiveGraph(str, enum.Enum):
    MAIN = "Main"
    FALLBACK = "Fallback"


class Frame(str, enum.Enum):
    WORLD = "World"
    ODOMETRY = "Odometry"


@dataclass(frozen=True)
class FrameBook:
    T_WO: Pose3 = field(default_factory=Pose3.identity)


@dataclass(frozen=True, eq=False)
class EstimatorSnapshot:
    t: float
    state: NavState
    T_WO: Pose3
    source: Source
    active: ActiveGraph
    seq: int

    @property
    def pose_world(self) -> Pose3:
        return self.state.pose

    @property
    def pose_odometry(self) -> Pose3:
        return self.T_WO.inverse().compose(self.state.pose)


# --------------------------------------------------------------------------- GNSS health


class GnssStatus(str, enum.Enum):
    HEALTHY = "Healthy"
    UNHEALTHY = "Unhealthy"


class GnssOutcome(str, enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED_OUTLIER = "RejectedOutlier"
    BUFFERED_UNHEALTHY = "BufferedUnhealthy"


@dataclass
class GnssHealth:
    """Per-fix quality gate with consecutive-count hysteresis."""

    max_variance: float = 0.01
    max_velocity: float = 2.0
    bad_count: int = 3
    good_count: int = 3
    good_streak: int = 0
    bad_streak: int = 0
    status: GnssStatus = GnssStatus.HEALTHY
    last_good: tuple[float, np.ndarray, float] | None = None  # t, position, covariance trace
    last_fix_t: float = -math.inf

    def __post_init__(self):
        if not (self.max_variance > 0 and self.max_velocity > 0):
            raise ValueError("health thresholds must be positive")
        if self.bad_count < 1 or self.good_count < 1:
            raise ValueError("health counts must be >= 1")

    def is_good(self, t: float, position: np.ndarray, covariance: np.ndarray) -> bool:
        """Covariance gate plus implied-velocity gate against the previous good
        fix; the displacement is first reduced by a 3-sigma noise allowance."""
        if np.max(np.diag(covariance)) > self.max_variance:
            return False
        if self.last_good is not None:
            t0, p0, var0 = self.last_good
            if t <= t0:
                return False
            slack = 3.0 * math.sqrt(var0 + float(np.trace(covariance)))
            if max(0.0, float(np.linalg.norm(position - p0)) - slack) / (t - t0) > self.max_velocity:
                return False
        return True

    def update(self, t: float, position: np.ndarray, covariance: np.ndarray) -> tuple[bool, GnssStatus | None]:
        """Classify one fix; returns ``(good, new_status_if_changed)``."""
        self.last_fix_t = max(self.last_fix_t, t)
        good = self.is_good(t, position, covariance)
        if good:
            self.last_good = (t, np.array(position, dtype=float), float(np.trace(covariance)))
            self.good_streak += 1
            self.bad_streak = 0
        else:
            self.bad_streak += 1
            self.good_streak = 0
        if self.status is GnssStatus.HEALTHY and self.bad_streak >= self.bad_count:
            return good, self._set(GnssStatus.UNHEALTHY)
        if self.status is GnssStatus.UNHEALTHY and self.good_streak >= self.good_count:
            return good, self._set(GnssStatus.HEALTHY)
        return good, None

    def _set(self, status: GnssStatus) -> GnssStatus:
        self.status = status
        self.good_streak = self.bad_streak = 0
        return status


def world_from_odometry(T_WI: Pose3, T_OI: Pose3) -> Pose3:
    """``T_WO = T_WI * T_OI^-1``: the world pose of the odometry frame that
    makes the odometry-frame estimate ``T_OI`` agree with ``T_WI``."""
    return T_WI.compose(T_OI.inverse())


# --------------------------------------------------------------------------- initialization


def _level_attitude(f: np.ndarray) -> np.ndarray:
    roll = math.atan2(f[1], f[2])
    pitch = math.atan2(-f[0], math.hypot(f[1], f[2]))
    return rot_y(pitch) @ rot_x(roll)


def initialize_static(
    imu: Sequence[ImuSample], fixes: Sequence[GnssFix], cfg: EstimatorConfig
) -> tuple[NavState, FrameBook, np.ndarray]:
    """Initial state at the last IMU sample's time, the frame book and a 15x15
    prior covariance, from a static IMU batch and dual-antenna fixes."""
    if len(imu) < 2:
        raise InitializationError("need at least two IMU samples")
    duration = imu[-1].t - imu[0].t
    period = duration / (len(imu) - 1)
    if duration + 0.5 * period < cfg.init.duration:
        raise InitializationError(f"static batch spans {duration:.3f} s, need {cfg.init.duration} s")
    acc = np.array([s.acc for s in imu])
    gyro = np.array([s.gyro for s in imu])
    spread = float(acc.std(axis=0).max())
    if spread > cfg.init.max_accel_std:
        raise InitializationError(f"motion detected: accel std {spread:.4f} m/s^2 exceeds {cfg.init.max_accel_std}")
    ex = cfg.extrinsics
    if len(ex.antennas) < 2:
        raise InitializationError("yaw initialization needs two antennas")
    fixes = [f for f in fixes if len(f.positions) >= 2]
    if not fixes:
        raise InitializationError("no dual-antenna GNSS fixes in the static batch")

    f_mean = acc.mean(axis=0)
    R_level = _level_attitude(f_mean)
    base_body = R_level @ (ex.antenna_in_imu(1) - ex.antenna_in_imu(0))
    base_world = np.mean([f.positions[1] - f.positions[0] for f in fixes], axis=0)
    sigma = math.sqrt(np.mean([np.diag(f.covariances[a]).mean() for f in fixes for a in (0, 1)]))
    horiz = math.hypot(base_body[0], base_body[1])
    if horiz < 3.0 * sigma:
        raise InitializationError(f"antenna baseline {horiz:.4f} m is below 3 sigma ({3 * sigma:.4f} m); yaw unobservable")
    yaw = math.atan2(base_world[1], base_world[0]) - math.atan2(base_body[1], base_body[0])
    R = rot_z(yaw) @ R_level

    g = np.asarray(cfg.gravity, dtype=float)
    bg = gyro.mean(axis=0)
    ba = f_mean + R.T @ g
    R_WG = R @ ex.R_IG
    p_left = np.mean([f.positions[0] for f in fixes], axis=0)
    p = antenna_to_imu(p_left, R_WG, ex.antennas[0])
    state = NavState(R, p, np.zeros(3), bg, ba)

    ic = cfg.init
    sigma_yaw = max(ic.sigma_yaw, sigma * math.sqrt(2.0 / len(fixes)) / horiz)
    pos_var = np.mean([np.diag(f.covariances[0]) for f in fixes], axis=0) / len(fixes) + ic.sigma_rot**2
    cov = np.diag(
        [ic.sigma_rot**2, ic.sigma_rot**2, sigma_yaw**2, *pos_var]
        + [ic.sigma_vel**2] * 3
        + [ic.sigma_bg**2] * 3
        + [ic.sigma_ba**2] * 3
    )
    return state, FrameBook(), cov


# --------------------------------------------------------------------------- estimator


@dataclass
class Diagnostics:
    imu_dropped: int = 0
    gnss_dropped: int = 0
    lidar_dropped: int = 0
    stale_measurements: int = 0
    unobservable: int = 0
    updates: int = 0
    outcomes: dict[str, int] = field(default_factory=lambda: {o.value: 0 for o in GnssOutcome})
    switches: list[tuple[float, str]] = field(default_factory=list)
    last_error: str = ""


@dataclass
class WaitCounters:
    imu: int = 0
    gnss: int = 0
    lidar: int = 0
    imu_during_update: int = 0  # ingests that overlapped an optimization (did not wait)


@dataclass(frozen=True, eq=False)
class _Correction:
    key: int
    state: NavState
    active: ActiveGraph
    switch_gen: int = 0  # number of switches back to main so far


class Estimator:
    """Sliding-window GNSS/IMU/lidar estimator with a fallback graph."""

    def __init__(self, cfg: EstimatorConfig | None = None, record: bool = True, realtime: bool = False):
        self.cfg = cfg or EstimatorConfig()
        self.g = np.asarray(self.cfg.gravity, dtype=float)
        self.record = record
        self.realtime = realtime
        self.history: list[EstimatorSnapshot] = []
        self.pseudo_global: list[tuple[float, Pose3]] = []  # lidar unary measurements (fallback only)
        self.diagnostics = Diagnostics()
        self.waits = WaitCounters()
        self.latencies_ns: list[int] = []
        hc = self.cfg.gnss
        self.health = GnssHealth(hc.max_std**2, hc.max_velocity, hc.bad_count, hc.good_count)
        self._initialized = False
        self._seq = 0
        self._snapshot: EstimatorSnapshot | None = None

        # IMU buffer: key == index; entries below the window are set to None
        self._imu: list[ImuSample | None] = []
        self._imu_t: list[float] = []
        self._pruned = 0
        # propagation state owned by the IMU path
        self._prop_key = 0
        self._prop_state: NavState | None = None
        self._T_WO = Pose3.identity()
        self._active = ActiveGraph.MAIN
        self._correction: _Correction | None = None
        self._applied: _Correction | None = None

        # update-worker state
        self._lock = threading.Lock()
        self._queue: deque = deque()
        self._trigger = threading.Event()
        self._busy = False
        self.main: GraphWindow | None = None
        self.fallback: GraphWindow | None = None
        self._deferred: list = []
        self._last_lidar: tuple[int, Pose3, Pose3] | None = None  # key, raw T_L0L, folded T_L0I
        self._anchor: tuple[Pose3, Pose3] | None = None  # T_WI, T_L0I at the switch
        self._last_lidar_t = -math.inf
        self._hlock = threading.Lock()
        self._buffer: list[GnssFix] = []  # good fixes of the current recovery streak
        self._switch_gen = 0
        self._applied_gen = 0
        self._tol = 0.005
        self._worker: threading.Thread | None = None
        self._stop = threading.Event()

    # ------------------------------------------------------------------ init

    @property
    def initialized(self) -> bool:
        return self._initialized

    def initialize(self, imu: Sequence[ImuSample], fixes: Sequence[GnssFix]) -> EstimatorSnapshot:
        state, book, cov = initialize_static(imu, fixes, self.cfg)
        t0 = imu[-1].t
        period = (imu[-1].t - imu[0].t) / (len(imu) - 1)
        self._tol = self.cfg.attach_tolerance if self.cfg.attach_tolerance is not None else 0.5 * period
        self._imu = [imu[-1]]
        self._imu_t = [t0]
        self._prop_state = state
        self._prop_key = 0
        self._T_WO = book.T_WO
        self.main = GraphWindow(self.cfg.smoother.horizon)
        self.main.add_node(0, t0, state)
        self.main.add_factor(PriorFactor(0, state, NoiseModel(cov)))
        last = max(fixes, key=lambda f: f.t)
        self.health.last_good = (last.t, last.positions[0].copy(), float(np.trace(last.covariances[0])))
        self.health.last_fix_t = max(last.t, t0)
        self._initialized = True
        return self._publish(t0, state, Source.OPTIMIZED)

    # ------------------------------------------------------------------ publishing

    def _publish(self, t: float, state: NavState, source: Source) -> EstimatorSnapshot:
        self._seq += 1
        snap = EstimatorSnapshot(t, state, self._T_WO, source, self._active, self._seq)
        self._snapshot = snap
        if self.record:
            self.history.append(snap)
        return snap

    @property
    def snapshot(self) -> EstimatorSnapshot | None:
        return self._snapshot

    def query(self, frame: Frame | str = Frame.WORLD) -> Pose3:
        snap = self._require_snapshot()
        if Frame(frame) is Frame.WORLD:
            return snap.pose_world
        return snap.pose_odometry

    def frame_book(self) -> FrameBook:
        return FrameBook(self._require_snapshot().T_WO)

    def _require_snapshot(self) -> EstimatorSnapshot:
        if self._snapshot is None:
            raise RuntimeError("estimator not initialized")
        return self._snapshot

    # ------------------------------------------------------------------ IMU path

    def ingest_imu(self, sample: ImuSample) -> EstimatorSnapshot:
        """Propagate to ``sample.t`` and publish; never waits on the update path."""
        t_in = time.perf_counter_ns()
        if not self._initialized:
            raise RuntimeError("estimator not initialized")
        if self._busy:
            self.waits.imu_during_update += 1
        k_prev = len(self._imu_t) - 1
        t_prev = self._imu_t[k_prev]
        if not sample.t > t_prev:
            self.diagnostics.imu_dropped += 1
            log.debug("IMU sample at %.6f dropped (not after %.6f)", sample.t, t_prev)
            return self._require_snapshot()
        state = propagate_step(self._prop_state, self._imu[k_prev], sample.t - t_prev, self.g)
        self._imu.append(sample)
        self._imu_t.append(sample.t)
        self._prop_key = k_prev + 1
        self._prop_state = state
        snap = self._publish(sample.t, state, Source.PROPAGATED)
        if self.realtime and self._correction is not self._applied:
            snap = self._apply_correction(self._correction)
        self.latencies_ns.append(time.perf_counter_ns() - t_in)
        return snap

    def _replay(self, key: int, state: NavState, upto: int) -> NavState:
        for k in range(key, upto):
            state = propagate_step(state, self._imu[k], self._imu_t[k + 1] - self._imu_t[k], self.g)
        return state

    def _apply_correction(self, c: _Correction) -> EstimatorSnapshot:
        self._applied = c
        k = self._prop_key
        state = self._replay(c.key, c.state, k)
        if c.switch_gen != self._applied_gen:
            self._applied_gen = c.switch_gen
            # keep the odometry-frame pose continuous across the switch
            T_OI = self._T_WO.inverse().compose(self._prop_state.pose)
            self._T_WO = world_from_odometry(state.pose, T_OI)
        self._active = c.active
        self._prop_state = state
        return self._publish(self._imu_t[k], state, Source.OPTIMIZED)

    # ------------------------------------------------------------------ GNSS / lidar paths

    def _enqueue(self, item, counter: str) -> None:
        if not self._lock.acquire(blocking=False):
            setattr(self.waits, counter, getattr(self.waits, counter) + 1)
            self._lock.acquire()
        try:
            self._queue.append(item)
        finally:
            self._lock.release()
        self._trigger.set()

    def ingest_gnss(self, fix: GnssFix) -> GnssOutcome:
        if not self._initialized:
            raise RuntimeError("estimator not initialized")
        with self._hlock:
            good, change = self.health.update(fix.t, fix.positions[0], fix.covariances[0])
            status = self.health.status
            if change is GnssStatus.UNHEALTHY:
                self._buffer = []
                self._enqueue(("to_fallback", fix.t), "gnss")
            elif status is GnssStatus.UNHEALTHY:
                if good:
                    self._buffer.append(fix)
                else:
                    self._buffer = []
            if change is GnssStatus.HEALTHY:
                self._buffer.append(fix)
                self._enqueue(("to_main", list(self._buffer)), "gnss")
                self._buffer = []
        if not good:
            outcome = GnssOutcome.REJECTED_OUTLIER
        elif change is GnssStatus.HEALTHY or status is GnssStatus.UNHEALTHY:
            outcome = GnssOutcome.BUFFERED_UNHEALTHY
        else:
            outcome = GnssOutcome.ACCEPTED
            self._enqueue(("gnss", fix), "gnss")
        self.diagnostics.outcomes[outcome.value] += 1
        return outcome

    def ingest_lidar(self, pose: LidarPose) -> None:
        if not self._initialized:
            raise RuntimeError("estimator not initialized")
        if not pose.t > self._last_lidar_t:
            self.diagnostics.lidar_dropped += 1
            log.debug("lidar pose at %.6f dropped (not after %.6f)", pose.t, self._last_lidar_t)
            return
        self._last_lidar_t = pose.t
        self._enqueue(("lidar", pose), "lidar")

    def ingest(self, e: MeasurementEvent):
        if isinstance(e, ImuSample):
            return self.ingest_imu(e)
        if isinstance(e, GnssFix):
            return self.ingest_gnss(e)
        if isinstance(e, LidarPose):
            return self.ingest_lidar(e)
        raise TypeError(f"unknown measurement type {type(e).__name__}")

    # ------------------------------------------------------------------ graph helpers

    def _key_at(self, t: float) -> int | None:
        """Nearest IMU key within tolerance; -1 if ``t`` is still ahead of the buffer."""
        times = self._imu_t
        n = len(times)
        i = bisect.bisect_left(times, t, 0, n)
        best = None
        for j in (i - 1, i):
            if 0 <= j < n and abs(times[j] - t) <= self._tol and (best is None or abs(times[j] - t) < abs(times[best] - t)):
                best = j
        if best is None and t > times[n - 1]:
            return -1
        return best

    def _preintegrate(self, a: int, b: int, bias: ImuBias):
        samples = self._imu[a:b]
        return preintegrate(samples, self._imu_t[b], bias, self.cfg.imu)

    def _imu_factor(self, a: int, b: int, state_a: NavState):
        delta = self._preintegrate(a, b, ImuBias.of(state_a))
        return ImuFactor(a, b, delta, self.cfg.imu, self.g), delta

    def _ensure_node(self, g: GraphWindow, k: int) -> bool:
        if k in g.nodes:
            return True
        keys = g.keys
        if k < keys[0]:
            return False
        if k > keys[-1]:
            a = keys[-1]
            fa, delta = self._imu_factor(a, k, g.value(a))
            g.add_node(k, self._imu_t[k], predict(g.value(a), delta, self.g))
            g.add_factor(fa)
            return True
        i = bisect.bisect_left(keys, k)
        a, b = keys[i - 1], keys[i]
        old = next(f for f in g.factors if isinstance(f, ImuFactor) and f.keys == (a, b))
        g.remove_factor(old)
        fa, delta = self._imu_factor(a, k, g.value(a))
        state_k = predict(g.value(a), delta, self.g)
        fb, _ = self._imu_factor(k, b, state_k)
        g.insert_node(k, self._imu_t[k], state_k)
        g.add_factor(fa)
        g.add_factor(fb)
        return True

    def _graphs(self) -> list[GraphWindow]:
        return [g for g in (self.main, self.fallback) if g is not None]

    def _add_gnss(self, g: GraphWindow, fix: GnssFix) -> str:
        k = self._key_at(fix.t)
        if k == -1:
            return "defer"
        if k is None or not self._ensure_node(g, k):
            return "stale"
        R_WG = g.value(k).R @ self.cfg.extrinsics.R_IG
        p = antenna_to_imu(fix.positions[0], R_WG, self.cfg.extrinsics.antennas[0])
        g.add_factor(GnssFactor(k, p, NoiseModel(fix.covariances[0])))
        return "ok"

    def _add_lidar(self, pose: LidarPose) -> str:
        k = self._key_at(pose.t)
        if k == -1:
            return "defer"
        if k is None or not self._ensure_node(self.main, k):
            return "stale"
        lc = self.cfg.lidar
        T_IL = self.cfg.extrinsics.T_IL
        raw = pose.pose
        folded = raw.compose(T_IL.inverse())
        prev = self._last_lidar
        if prev is not None and prev[0] in self.main.nodes and prev[0] < k:
            meas = prev[1].inverse().compose(raw)
            noise = NoiseModel.diagonal([lc.between_sigma_rot] * 3 + [lc.between_sigma_trans] * 3)
            self.main.add_factor(LidarBetweenFactor(prev[0], k, meas, T_IL, noise))
        if self.fallback is not None and self._ensure_node(self.fallback, k):
            if self._anchor is None:
                self._anchor = (self.fallback.value(k).pose, folded)
            else:
                meas = pseudo_global_measurement(self._anchor[0], self._anchor[1], folded)
                noise = lidar_unary_noise(lc.unary_sigma_rot, lc.unary_sigma_trans, lc.roll_pitch_inflation)
                self.fallback.add_factor(LidarUnaryFactor(k, meas, noise))
                if self.record:
                    self.pseudo_global.append((self._imu_t[k], meas))
        self._last_lidar = (k, raw, folded)
        return "ok"

    def _optimize(self, g: GraphWindow) -> bool:
        try:
            optimize(g, self.cfg.smoother)
        except UnobservableGraphError as exc:
            self.diagnostics.unobservable += 1
            self.diagnostics.last_error = str(exc)
            log.warning("update skipped: %s", exc)
            return False
        trim_window(g)
        return True

    # ------------------------------------------------------------------ update

    def switch_to_fallback(self, t: float | None = None) -> None:
        """Clone the main graph into the fallback graph; ``t`` is the time the
        outage was detected (defaults to the latest IMU time)."""
        if self.fallback is not None:
            return
        self._optimize(self.main)
        self.fallback = self.main.copy()
        lid = self._last_lidar
        if lid is not None and lid[0] in self.main.nodes:
            self._anchor = (self.main.value(lid[0]).pose, lid[2])
        else:
            self._anchor = None
        self.diagnostics.switches.append((self._imu_t[-1] if t is None else t, ActiveGraph.FALLBACK.value))

    def switch_to_main(self, fixes: Sequence[GnssFix] = ()) -> None:
        """Feed the recovery streak to the main graph and drop the fallback graph."""
        if self.fallback is None:
            return
        for fix in fixes:
            self._dispatch(("gnss", fix))
        self.fallback = None
        self._anchor = None
        t = fixes[-1].t if fixes else self._imu_t[-1]
        self.diagnostics.switches.append((t, ActiveGraph.MAIN.value))

    def _dispatch(self, item) -> bool:
        kind, payload = item
        if kind == "gnss":
            res = self._add_gnss(self.main, payload)
        elif kind == "lidar":
            res = self._add_lidar(payload)
        else:
            return True
        if res == "defer":
            self._deferred.append(item)
        elif res == "stale":
            self.diagnostics.stale_measurements += 1
            log.debug("%s measurement at %.6f older than the window; dropped", kind, payload.t)
        return res == "ok"

    def _check_watchdog(self) -> None:
        with self._hlock:
            h = self.health
            latest = self._imu_t[-1]
            if h.status is GnssStatus.HEALTHY and latest - h.last_fix_t > self.cfg.gnss.timeout:
                h._set(GnssStatus.UNHEALTHY)
                self._buffer = []
                self._enqueue(("to_fallback", latest), "gnss")

    def run_update(self) -> EstimatorSnapshot:
        """Drain pending measurements into the graph(s), optimize, trim and
        post the correction for the propagation path."""
        self._trigger.clear()
        self._check_watchdog()
        with self._lock:
            items = list(self._queue)
            self._queue.clear()
        items = self._deferred + items
        self._deferred = []
        if not items:
            return self._require_snapshot()
        self._busy = True
        try:
            to_main = False
            changed = False
            for item in items:
                kind = item[0]
                if kind == "to_fallback":
                    if self.fallback is None:
                        self.switch_to_fallback(item[1])
                        changed = True
                elif kind == "to_main":
                    if self.fallback is not None:
                        self.switch_to_main(item[1])
                        to_main = changed = True
                    else:
                        for fix in item[1]:
                            changed |= self._dispatch(("gnss", fix))
                else:
                    changed |= self._dispatch(item)
            if not changed:
                return self._require_snapshot()
            ok = all([self._optimize(g) for g in self._graphs()])
            self.diagnostics.updates += 1
            if not ok and not to_main:
                return self._require_snapshot()
            g = self.fallback if self.fallback is not None else self.main
            active = ActiveGraph.FALLBACK if self.fallback is not None else ActiveGraph.MAIN
            u = g.newest_key
            if to_main:
                self._switch_gen += 1
            corr = _Correction(u, g.value(u), active, self._switch_gen)
            self._prune()
        finally:
            self._busy = False
        self._correction = corr
        if not self.realtime:
            return self._apply_correction(corr)
        return self._require_snapshot()

    def _prune(self) -> None:
        oldest = min(g.oldest_key for g in self._graphs())
        if self._last_lidar is not None:
            oldest = min(oldest, self._last_lidar[0])
        for k in range(self._pruned, oldest):
            self._imu[k] = None
        self._pruned = max(self._pruned, oldest)

    # ------------------------------------------------------------------ drivers

    def run_events(self, events: Sequence[MeasurementEvent]) -> None:
        """Deterministic single-context loop; an update runs once all events
        sharing a timestamp have been ingested."""
        n = len(events)
        timeout = self.cfg.gnss.timeout
        for i, e in enumerate(events):
            self.ingest(e)
            if self.health.status is GnssStatus.HEALTHY and e.t - self.health.last_fix_t > timeout:
                self._check_watchdog()
            if self._trigger.is_set() and (i + 1 == n or events[i + 1].t > e.t):
                self.run_update()

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            if self._trigger.wait(self.cfg.gnss.timeout):
                self.run_update()
            else:
                self._check_watchdog()

    def start(self) -> None:
        self.realtime = True
        self._stop.clear()
        self._worker = threading.Thread(target=self._worker_loop, name="graph-update", daemon=True)
        self._worker.start()

    def stop(self) -> None:
        self._stop.set()
        if self._worker is not None:
            self._worker.join()
            self._worker = None
        self.run_update()
        if self._correction is not self._applied:
            self._apply_correction(self._correction)

    def run_realtime(self, events: Sequence[MeasurementEvent], speed: float = 1.0, switch_interval: float = 5e-5) -> None:
        """Replay ``events`` against the wall clock (``speed`` x real time) with
        one feeder thread per sensor and the update worker in the background."""
        streams: dict[type, list] = {ImuSample: [], GnssFix: [], LidarPose: []}
        for e in events:
            streams[type(e)].append(e)
        t0 = events[0].t
        old = sys.getswitchinterval()
        sys.setswitchinterval(switch_interval)
        start = time.perf_counter() + 0.05
        errors: list[BaseException] = []

        def feed(items, fn):
            try:
                for e in items:
                    delay = start + (e.t - t0) / speed - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                    fn(e)
            except BaseException as exc:  # surfaced after join
                errors.append(exc)

        threads = [
            threading.Thread(target=feed, args=(streams[ImuSample], self.ingest_imu), name="imu"),
            threading.Thread(target=feed, args=(streams[GnssFix], self.ingest_gnss), name="gnss"),
            threading.Thread(target=feed, args=(streams[LidarPose], self.ingest_lidar), name="lidar"),
        ]
        self.start()
        try:
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        finally:
            self.stop()
            sys.setswitchinterval(old)
        if errors:
            raise errors[0]


def sorted_events(events: Iterable[MeasurementEvent]) -> list[MeasurementEvent]:
    return sorted(events, key=event_order)
