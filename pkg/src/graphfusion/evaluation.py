"""Scenario runner and evaluation metrics.

Report JSON (``report.json``) fields::

    scenario            str     scenario name (file stem)
    mode                str     "deterministic" | "realtime"
    counts              dict    imu / gnss / lidar events fed, snapshots published
    rpe                 dict    relative position error vs accepted GNSS fixes: mean, std (m), n
    consistency         dict    propagated-vs-optimized deviation: mean, std (m), n
    latency             dict|null  IMU ingest latency: mean, std, median (s), n; null when deterministic
    truth_error         dict|null  world-frame position error vs ground truth: mean, max (m), n
    wait_counters       dict    ingest waits on the update path (realtime)
    gnss_outcomes       dict    Accepted / RejectedOutlier / BufferedUnhealthy counts
    fallback_intervals  list    [t_start, t_end] spans with the fallback graph active
    diagnostics         dict    dropped / stale / unobservable counts, updates
    files               list    emitted CSV files (relative to the output directory)
    thresholds          dict    acceptance thresholds taken from the scenario
    passed              dict    per-threshold verdict
    failure             str|null  initialization / run failure reason

Threshold keys: ``rpe_mean_max``, ``consistency_mean_max``, ``latency_median_max``,
``truth_error_mean_max`` (all in m or s).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import EstimatorConfig
from .estimator import Estimator, EstimatorSnapshot, GnssOutcome, InitializationError, Source
from .manifold import quat_from_rot
from .measurements import GnssFix, LidarPose
from .preintegration import ImuSample
from .simulator import ScenarioSpec, Streams, generate, load_scenario, read_log

# --------------------------------------------------------------------------- metrics


def _interp(times: np.ndarray, values: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(t, times, values[:, i]) for i in range(values.shape[1])], axis=1)


def position_errors(
    est_t: Sequence[float], est_p: np.ndarray, ref_t: Sequence[float], ref_p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Error vectors ``estimate(t) - reference(t)`` at every reference time
    covered by the estimate (linear interpolation). Returns ``(times, errors)``."""
    est_t = np.asarray(est_t, dtype=float)
    ref_t = np.asarray(ref_t, dtype=float)
    est_p = np.asarray(est_p, dtype=float).reshape(-1, 3)
    ref_p = np.asarray(ref_p, dtype=float).reshape(-1, 3)
    if len(est_t) == 0 or len(ref_t) == 0:
        raise ValueError("empty stream")
    mask = (ref_t >= est_t[0]) & (ref_t <= est_t[-1])
    if not mask.any():
        raise ValueError("streams do not overlap in time")
    t = ref_t[mask]
    return t, _interp(est_t, est_p, t) - ref_p[mask]


def relative_position_error(
    est_t: Sequence[float], est_p: np.ndarray, ref_t: Sequence[float], ref_p: np.ndarray
) -> tuple[float, float]:
    """Mean and standard deviation of the error norm at the reference times."""
    _, err = position_errors(est_t, est_p, ref_t, ref_p)
    n = np.linalg.norm(err, axis=1)
    return float(n.mean()), float(n.std())


def consistency_deviations(snapshots: Sequence[EstimatorSnapshot]) -> tuple[np.ndarray, np.ndarray]:
    """Per optimized snapshot: odometry-frame distance to the propagated
    snapshot published for the same timestamp. Returns ``(times, deviations)``."""
    prop: dict[float, EstimatorSnapshot] = {}
    times, devs = [], []
    for s in snapshots:
        if s.source is Source.PROPAGATED:
            prop[s.t] = s
        else:
            p = prop.get(s.t)
            if p is not None:
                times.append(s.t)
                devs.append(float(np.linalg.norm(p.pose_odometry.t - s.pose_odometry.t)))
    return np.array(times), np.array(devs)


def consistency(snapshots: Sequence[EstimatorSnapshot]) -> tuple[float, float]:
    _, d = consistency_deviations(snapshots)
    if d.size == 0:
        raise ValueError("no optimized snapshot with a matching propagated snapshot")
    return float(d.mean()), float(d.std())


def latency_stats(latencies_ns: Sequence[int]) -> dict:
    x = np.asarray(latencies_ns, dtype=float) * 1e-9
    if x.size == 0:
        return {"mean": math.nan, "std": math.nan, "median": math.nan, "n": 0}
    return {"mean": float(x.mean()), "std": float(x.std()), "median": float(np.median(x)), "n": int(x.size)}


def first_per_time(snapshots: Sequence[EstimatorSnapshot]) -> list[EstimatorSnapshot]:
    """The first snapshot published for each timestamp (the propagated one)."""
    out: list[EstimatorSnapshot] = []
    for s in snapshots:
        if not out or s.t > out[-1].t:
            out.append(s)
    return out


def antenna_track(snapshots: Sequence[EstimatorSnapshot], lever: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([s.t for s in snapshots])
    p = np.array([s.state.p + s.state.R @ lever for s in snapshots])
    return t, p


def fallback_intervals(switches: Sequence[tuple[float, str]], t_end: float) -> list[list[float]]:
    out: list[list[float]] = []
    for t, which in switches:
        if which == "Fallback":
            out.append([t, t_end])
        elif out and out[-1][1] == t_end:
            out[-1][1] = t
    return out


# --------------------------------------------------------------------------- report


@dataclass
class RunReport:
    scenario: str = ""
    mode: str = "deterministic"
    counts: dict = field(default_factory=dict)
    rpe: dict | None = None
    consistency: dict | None = None
    latency: dict | None = None
    truth_error: dict | None = None
    wait_counters: dict = field(default_factory=dict)
    gnss_outcomes: dict = field(default_factory=dict)
    fallback_intervals: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None and all(self.passed.values())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True)

    @staticmethod
    def from_json(text: str) -> RunReport:
        d = json.loads(text)
        names = {f.name for f in fields(RunReport)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report field(s): {sorted(unknown)}")
        return RunReport(**d)

    def evaluate_thresholds(self) -> None:
        metric = {
            "rpe_mean_max": (self.rpe or {}).get("mean"),
            "consistency_mean_max": (self.consistency or {}).get("mean"),
            "latency_median_max": (self.latency or {}).get("median"),
            "truth_error_mean_max": (self.truth_error or {}).get("mean"),
        }
        self.passed = {}
        for key, limit in self.thresholds.items():
            if key not in metric:
                raise ValueError(f"unknown acceptance threshold {key!r}")
            value = metric[key]
            self.passed[key] = value is not None and math.isfinite(value) and value < limit


# --------------------------------------------------------------------------- running


def split_initialization(streams: Streams, duration: float):
    """Static batch (IMU and GNSS up to ``t0 + duration``) and the remaining events."""
    if not streams.imu:
        raise InitializationError("no IMU data")
    t0 = streams.imu[0].t
    cut = t0 + duration + 1e-9
    imu = [s for s in streams.imu if s.t <= cut]
    t_init = imu[-1].t
    fixes = [f for f in streams.gnss if f.t <= t_init]
    events = [e for e in streams.events() if e.t > t_init]
    return imu, fixes, events


@dataclass
class RunResult:
    report: RunReport
    estimator: Estimator | None
    streams: Streams
    outcomes: list[tuple[GnssFix, GnssOutcome]] = field(default_factory=list)


def _write_pose_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "qx", "qy", "qz", "qw"])
        for t, pose in rows:
            w.writerow([repr(float(x)) for x in (t, *pose.t, *quat_from_rot(pose.R))])


def run_streams(
    streams: Streams,
    cfg: EstimatorConfig,
    name: str = "scenario",
    thresholds: dict | None = None,
    out_dir: str | Path | None = None,
    realtime: bool = False,
    speed: float = 1.0,
) -> RunResult:
    report = RunReport(scenario=name, mode="realtime" if realtime else "deterministic", thresholds=dict(thresholds or {}))
    est = Estimator(cfg, record=True)
    try:
        imu, fixes, events = split_initialization(streams, cfg.init.duration)
        est.initialize(imu, fixes)
    except InitializationError as exc:
        report.failure = f"initialization failed: {exc}"
        report.evaluate_thresholds()
        _emit(report, out_dir)
        return RunResult(report, None, streams)

    outcomes: list[tuple[GnssFix, GnssOutcome]] = []
    ingest_gnss = est.ingest_gnss

    def gnss_hook(fix: GnssFix) -> GnssOutcome:
        o = ingest_gnss(fix)
        outcomes.append((fix, o))
        return o

    est.ingest_gnss = gnss_hook  # type: ignore[method-assign]
    if realtime:
        est.run_realtime(events, speed=speed)
    else:
        est.run_events(events)

    hist = est.history
    report.counts = {
        "imu": sum(isinstance(e, ImuSample) for e in events),
        "gnss": len(outcomes),
        "lidar": sum(isinstance(e, LidarPose) for e in events),
        "snapshots": len(hist),
    }
    lever = cfg.extrinsics.antenna_in_imu(0)
    track = first_per_time(hist)
    accepted = [f for f, o in outcomes if o is GnssOutcome.ACCEPTED]
    err_t = err = None
    if accepted:
        ts, ps = antenna_track(track, lever)
        err_t, err = position_errors(ts, ps, [f.t for f in accepted], np.array([f.positions[0] for f in accepted]))
        n = np.linalg.norm(err, axis=1)
        report.rpe = {"mean": float(n.mean()), "std": float(n.std()), "n": int(n.size)}
    ct, cd = consistency_deviations(hist)
    if cd.size:
        report.consistency = {"mean": float(cd.mean()), "std": float(cd.std()), "n": int(cd.size)}
    if realtime:
        report.latency = latency_stats(est.latencies_ns)
    if streams.truth:
        truth = {round(s.t, 9): s.p for s in streams.truth}
        d = [np.linalg.norm(s.state.p - truth[round(s.t, 9)]) for s in track if round(s.t, 9) in truth]
        if d:
            report.truth_error = {"mean": float(np.mean(d)), "max": float(np.max(d)), "n": len(d)}
    report.wait_counters = asdict(est.waits)
    report.gnss_outcomes = dict(est.diagnostics.outcomes)
    report.fallback_intervals = fallback_intervals(est.diagnostics.switches, hist[-1].t)
    dg = est.diagnostics
    report.diagnostics = {
        "imu_dropped": dg.imu_dropped,
        "lidar_dropped": dg.lidar_dropped,
        "stale_measurements": dg.stale_measurements,
        "unobservable": dg.unobservable,
        "updates": dg.updates,
        "switches": [list(s) for s in dg.switches],
    }
    report.evaluate_thresholds()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_pose_csv(out / "trajectory_world.csv", ((s.t, s.pose_world) for s in track))
        _write_pose_csv(out / "trajectory_odometry.csv", ((s.t, s.pose_odometry) for s in track))
        _write_pose_csv(
            out / "trajectory_optimized.csv", ((s.t, s.pose_world) for s in hist if s.source is Source.OPTIMIZED)
        )
        with open(out / "error_vs_time.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "error", "ex", "ey", "ez"])
            if err is not None:
                for t, e in zip(err_t, err):
                    w.writerow([repr(float(x)) for x in (t, np.linalg.norm(e), *e)])
        with open(out / "consistency_vs_time.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "deviation"])
            for t, d in zip(ct, cd):
                w.writerow([repr(float(t)), repr(float(d))])
        report.files = [
            "trajectory_world.csv",
            "trajectory_odometry.csv",
            "trajectory_optimized.csv",
            "error_vs_time.csv",
            "consistency_vs_time.csv",
        ]
    _emit(report, out_dir)
    return RunResult(report, est, streams, outcomes)


def _emit(report: RunReport, out_dir) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")


def run_scenario(
    source: str | Path | ScenarioSpec,
    cfg: EstimatorConfig | None = None,
    out_dir: str | Path | None = None,
    realtime: bool = False,
    speed: float = 1.0,
) -> RunResult:
    """Simulate a scenario (YAML file or spec) or replay a log directory, run
    the estimator and compute the report."""
    cfg = cfg or EstimatorConfig()
    if isinstance(source, ScenarioSpec):
        spec, name, streams = source, "scenario", generate(source)
    else:
        path = Path(source)
        if path.is_dir():
            streams = read_log(path)
            name = path.name
            spec = load_scenario(path / "scenario.yaml") if (path / "scenario.yaml").exists() else None
        else:
            spec = load_scenario(path)
            name = path.stem
            streams = generate(spec)
    thresholds = spec.acceptance if spec is not None else {}
    return run_streams(streams, cfg, name, thresholds, out_dir, realtime, speed)
