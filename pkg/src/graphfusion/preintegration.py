"""On-manifold IMU preintegration with first-order bias correction.

Sample convention: an :class:`ImuSample` stamped ``t`` holds over ``[t, t + dt)``.
Deltas exclude gravity; it is injected in :func:`predict`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .manifold import normalize_rotation, skew, so3_exp, so3_right_jacobian
from .state import NavState

log = logging.getLogger(__name__)

MAX_DT = 0.1
BIAS_WARN = 0.1


class ImuStreamGap(ValueError):
    """Raised when an integration step is non-positive or longer than ``MAX_DT``."""


@dataclass(frozen=True, eq=False)
class ImuSample:
    t: float
    acc: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "acc", np.asarray(self.acc, dtype=float).reshape(3))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))


@dataclass(frozen=True, eq=False)
class ImuBias:
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "bg", np.asarray(self.bg, dtype=float).reshape(3))
        object.__setattr__(self, "ba", np.asarray(self.ba, dtype=float).reshape(3))

    @staticmethod
    def of(state: NavState) -> ImuBias:
        return ImuBias(state.bg, state.ba)


@dataclass(frozen=True)
class ImuNoiseSpec:
    """Continuous-time noise densities.

    gyro_noise: rad/s/sqrt(Hz); accel_noise: m/s^2/sqrt(Hz);
    gyro_bias_walk: rad/s^2/sqrt(Hz); accel_bias_walk: m/s^3/sqrt(Hz);
    integration_noise: m/sqrt(s), a small position random walk that keeps
    the covariance of very short spans invertible (a single step otherwise
    ties position noise rigidly to velocity noise).
    """

    gyro_noise: float = 1.7e-4
    accel_noise: float = 2e-3
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    integration_noise: float = 1e-4

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_bias_walk", "accel_bias_walk", "integration_noise"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


_Z33 = np.zeros((3, 3))


@dataclass(frozen=True, eq=False)
class PreintegratedDelta:
    dR: np.ndarray = field(default_factory=lambda: np.eye(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: float = 0.0
    # covariance of [dR, dv, dp]
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    J_R_bg: np.ndarray = _Z33
    J_v_bg: np.ndarray = _Z33
    J_v_ba: np.ndarray = _Z33
    J_p_bg: np.ndarray = _Z33
    J_p_ba: np.ndarray = _Z33
    bias_linpoint: ImuBias = field(default_factory=ImuBias)

    @staticmethod
    def fresh(bias: ImuBias | None = None) -> PreintegratedDelta:
        return PreintegratedDelta(bias_linpoint=bias or ImuBias())


def integrate(delta: PreintegratedDelta, sample: ImuSample, dt: float, noise: ImuNoiseSpec) -> PreintegratedDelta:
    """Add one sample held over ``dt`` seconds.

    Position is advanced before velocity, both with the pre-update rotation,
    so constant inputs integrate exactly.
    """
    if not 0.0 < dt <= MAX_DT:
        raise ImuStreamGap(f"integration step {dt!r} s outside (0, {MAX_DT}]")
    b = delta.bias_linpoint
    a = sample.acc - b.ba
    w = sample.gyro - b.bg
    dR = delta.dR
    dt2 = dt * dt

    step = so3_exp(w * dt)
    Jr = so3_right_jacobian(w * dt)
    dR_a_hat = dR @ skew(a)

    A = np.eye(9)
    A[0:3, 0:3] = step.T
    A[3:6, 0:3] = -dR_a_hat * dt
    A[6:9, 0:3] = -0.5 * dR_a_hat * dt2
    A[6:9, 3:6] = np.eye(3) * dt
    Bg = np.zeros((9, 3))
    Bg[0:3] = Jr * dt
    Ba = np.zeros((9, 3))
    Ba[3:6] = dR * dt
    Ba[6:9] = 0.5 * dR * dt2
    cov = A @ delta.cov @ A.T
    cov += (noise.gyro_noise**2 / dt) * (Bg @ Bg.T) + (noise.accel_noise**2 / dt) * (Ba @ Ba.T)
    cov[6:9, 6:9] += np.eye(3) * (noise.integration_noise**2 * dt)
    cov = 0.5 * (cov + cov.T)

    return PreintegratedDelta(
        dR=normalize_rotation(dR @ step),
        dv=delta.dv + dR @ a * dt,
        dp=delta.dp + delta.dv * dt + 0.5 * dR @ a * dt2,
        dt=delta.dt + dt,
        cov=cov,
        J_R_bg=step.T @ delta.J_R_bg - Jr * dt,
        J_v_bg=delta.J_v_bg - dR_a_hat @ delta.J_R_bg * dt,
        J_v_ba=delta.J_v_ba - dR * dt,
        J_p_bg=delta.J_p_bg + delta.J_v_bg * dt - 0.5 * dR_a_hat @ delta.J_R_bg * dt2,
        J_p_ba=delta.J_p_ba + delta.J_v_ba * dt - 0.5 * dR * dt2,
        bias_linpoint=b,
    )


def preintegrate(
    samples: Sequence[ImuSample], t_end: float, bias: ImuBias, noise: ImuNoiseSpec
) -> PreintegratedDelta:
    """Integrate ``samples`` (sorted) up to ``t_end``; sample ``i`` spans
    ``[t_i, t_{i+1})`` and the last one spans ``[t_last, t_end)``."""
    delta = PreintegratedDelta.fresh(bias)
    n = len(samples)
    for i, s in enumerate(samples):
        t_next = samples[i + 1].t if i + 1 < n else t_end
        if t_next > s.t:
            delta = integrate(delta, s, t_next - s.t, noise)
    return delta


def correct_for_bias(delta: PreintegratedDelta, bias: ImuBias) -> PreintegratedDelta:
    """First-order bias update; ``bias_linpoint`` (and the Jacobians) stay put."""
    dbg = bias.bg - delta.bias_linpoint.bg
    dba = bias.ba - delta.bias_linpoint.ba
    if not (dbg.any() or dba.any()):
        return delta
    if max(np.abs(dbg).max(), np.abs(dba).max()) > BIAS_WARN:
        log.warning("bias correction %.3g beyond linearization range", max(np.abs(dbg).max(), np.abs(dba).max()))
    return replace(
        delta,
        dR=normalize_rotation(delta.dR @ so3_exp(delta.J_R_bg @ dbg)),
        dv=delta.dv + delta.J_v_bg @ dbg + delta.J_v_ba @ dba,
        dp=delta.dp + delta.J_p_bg @ dbg + delta.J_p_ba @ dba,
    )


def predict(state: NavState, delta: PreintegratedDelta, gravity: np.ndarray) -> NavState:
    """Propagate ``state`` across ``delta``.

    The delta is bias-corrected to the biases carried by ``state`` first, so a
    delta integrated at another bias can be passed directly.
    """
    d = correct_for_bias(delta, ImuBias(state.bg, state.ba))
    T = d.dt
    g = np.asarray(gravity, dtype=float)
    return NavState(
        normalize_rotation(state.R @ d.dR),
        state.p + state.v * T + 0.5 * g * T * T + state.R @ d.dp,
        state.v + g * T + state.R @ d.dv,
        state.bg,
        state.ba,
    )


def propagate_step(state: NavState, sample: ImuSample, dt: float, gravity: np.ndarray) -> NavState:
    """Single-sample strapdown step with the same discretisation as
    :func:`integrate` followed by :func:`predict` (noise and Jacobians skipped)."""
    a = state.R @ (sample.acc - state.ba)
    return NavState(
        normalize_rotation(state.R @ so3_exp((sample.gyro - state.bg) * dt)),
        state.p + state.v * dt + 0.5 * (a + gravity) * dt * dt,
        state.v + (a + gravity) * dt,
        state.bg,
        state.ba,
    )


def bias_walk_covariance(dt: float, noise: ImuNoiseSpec) -> np.ndarray:
    """Covariance of ``[b_g(j) - b_g(i), b_a(j) - b_a(i)]`` over ``dt`` seconds."""
    return np.diag([noise.gyro_bias_walk**2 * dt] * 3 + [noise.accel_bias_walk**2 * dt] * 3)


def samples_between(samples: Iterable[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    return [s for s in samples if t0 <= s.t < t1]
