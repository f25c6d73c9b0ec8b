"""Independent reference implementations used by the tests.

The dense solver shares only the residual definitions with the package: it
uses numerical Jacobians, a dense stacked system and ``numpy.linalg.lstsq``
instead of the analytic Jacobians, banded normal equations and LM damping.
"""
import numpy as np
from scipy.spatial.transform import Rotation

from graphfusion.factors import GnssFactor, ImuFactor, NoiseModel, PriorFactor
from graphfusion.preintegration import ImuBias, ImuNoiseSpec, predict, preintegrate
from graphfusion.simulator import ScenarioSpec, TrajectorySpec, generate
from graphfusion.smoother import GraphWindow, SolverConfig, optimize, trim_window
from graphfusion.state import NavState

D = 15


def _stack(factors, values, keys):
    return np.concatenate([f.noise.sqrt_info @ f.residual(values) for f in factors])


def dense_gauss_newton(factors, values, iterations=20, eps=1e-6, tol=1e-12):
    keys = sorted(values)
    values = dict(values)
    for _ in range(iterations):
        e0 = _stack(factors, values, keys)
        J = np.zeros((e0.size, D * len(keys)))
        for a, k in enumerate(keys):
            for i in range(D):
                d = np.zeros(D)
                d[i] = eps
                plus = dict(values)
                minus = dict(values)
                plus[k] = values[k].retract(d)
                minus[k] = values[k].retract(-d)
                J[:, a * D + i] = (_stack(factors, plus, keys) - _stack(factors, minus, keys)) / (2 * eps)
        step = np.linalg.lstsq(J, -e0, rcond=None)[0]
        values = {k: values[k].retract(step[a * D : (a + 1) * D]) for a, k in enumerate(keys)}
        if np.abs(step).max() < tol:
            break
    return values


def circle_streams(duration, seed=3, gnss_sigma=0.02):
    spec = ScenarioSpec(
        trajectory=TrajectorySpec("circle", duration, {"radius": 10.0, "speed": 1.0}),
        gyro_bias=np.array([0.002, -0.001, 0.001]),
        accel_bias=np.array([0.02, -0.01, 0.01]),
        gnss_sigma=gnss_sigma,
        seed=seed,
    )
    return generate(spec)


class ImuGnssProblem:
    """Nodes at every ``stride``-th IMU sample, IMU factors between them and a
    GNSS-like position factor (truth plus noise) on every node."""

    def __init__(self, duration, stride=5, seed=3, gnss_sigma=0.02):
        self.streams = circle_streams(duration, seed)
        self.noise = ImuNoiseSpec()
        self.gravity = np.array([0.0, 0.0, -9.81])
        imu, truth = self.streams.imu, self.streams.truth
        self.node_idx = list(range(0, len(imu), stride))
        self.times = [imu[i].t for i in self.node_idx]
        rng = np.random.default_rng(seed)
        self.truth = {
            k: NavState(truth[i].pose.R, truth[i].p, truth[i].v, truth[i].bias.bg, truth[i].bias.ba)
            for k, i in enumerate(self.node_idx)
        }
        self.fixes = {k: self.truth[k].p + rng.normal(scale=gnss_sigma, size=3) for k in self.truth}
        self.gnss_sigma = gnss_sigma
        x0 = self.truth[0]
        self.prior_mean = NavState(x0.R, x0.p, x0.v, np.zeros(3), np.zeros(3))
        self.prior_cov = np.diag([1e-4] * 3 + [1e-4] * 3 + [1e-4] * 3 + [1e-4] * 3 + [1e-2] * 3)

    def delta(self, k, bias):
        a, b = self.node_idx[k], self.node_idx[k + 1]
        return preintegrate(self.streams.imu[a:b], self.streams.imu[b].t, bias, self.noise)

    def prior(self):
        return PriorFactor(0, self.prior_mean, NoiseModel(self.prior_cov))

    def gnss(self, k):
        return GnssFactor(k, self.fixes[k], NoiseModel(np.eye(3) * self.gnss_sigma**2))

    def imu(self, k, bias):
        return ImuFactor(k, k + 1, self.delta(k, bias), self.noise, self.gravity)

    def dead_reckoning(self, n):
        """Initial values by chaining predictions from the prior mean."""
        x = self.prior_mean
        values = {0: x}
        factors = [self.prior(), self.gnss(0)]
        for k in range(n - 1):
            f = self.imu(k, ImuBias(x.bg, x.ba))
            x = predict(x, f.delta, self.gravity)
            values[k + 1] = x
            factors += [f, self.gnss(k + 1)]
        return values, factors


def fine_step_prediction(R, p, v, signal, t0, duration, gravity, step=1e-4):
    """Integrate body rate and specific force ``signal(t) -> (w, f)`` with a
    small step, rotating the specific force at the mid-step attitude."""
    R, p, v = np.array(R, dtype=float), np.array(p, dtype=float), np.array(v, dtype=float)
    for i in range(int(round(duration / step))):
        w, f = signal(t0 + (i + 0.5) * step)
        half = Rotation.from_rotvec(w * step / 2).as_matrix()
        a = R @ half @ f + gravity
        p = p + v * step + 0.5 * a * step * step
        v = v + a * step
        R = R @ half @ half
    return R, p, v


def sliding_vs_batch(duration=60.0, seed=7, horizon=5.0, every=4):
    """Final position of a fixed-lag run (optimized every ``every`` nodes and
    trimmed to ``horizon``) and of the full batch over the same factors."""
    prob = ImuGnssProblem(duration, stride=5, seed=seed)
    n = len(prob.node_idx) - 1
    cfg = SolverConfig(horizon=horizon)
    win = GraphWindow(horizon=horizon)
    win.add_node(0, prob.times[0], prob.prior_mean)
    win.add_factor(prob.prior())
    win.add_factor(prob.gnss(0))
    factors = [prob.prior(), prob.gnss(0)]
    for k in range(n - 1):
        last = win.value(k)
        f = prob.imu(k, ImuBias(last.bg, last.ba))
        win.add_node(k + 1, prob.times[k + 1], predict(last, f.delta, prob.gravity))
        win.add_factor(f)
        win.add_factor(prob.gnss(k + 1))
        factors += [f, prob.gnss(k + 1)]
        if (k + 1) % every == 0:
            optimize(win, cfg)
            trim_window(win)
    optimize(win, cfg)
    batch = GraphWindow(horizon=1e9)
    for k in range(n):
        batch.add_node(k, prob.times[k], prob.truth[k])
    for f in factors:
        batch.add_factor(f)
    optimize(batch, SolverConfig(max_iterations=30, rel_tolerance=1e-12))
    return win.value(n - 1).p, batch.value(n - 1).p, prob.truth[n - 1].p
