"""Residuals, analytic Jacobians and factor containers.

All Jacobians are taken with respect to the 15-dimensional :class:`NavState`
tangent ``[rot, pos, vel, bg, ba]`` (right rotation perturbation, world-frame
additive position/velocity). Pose residuals follow ``r = Log(h^-1 * z)`` with
``h`` the prediction and ``z`` the measurement.
"""
from __future__ import annotations

import enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .manifold import (
    Pose3,
    adjoint_batch,
    se3_log,
    se3_log_batch,
    se3_right_jacobian_inv,
    se3_right_jacobian_inv_batch,
    skew,
    skew_batch,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
    so3_right_jacobian,
    so3_right_jacobian_batch,
    so3_right_jacobian_inv,
    so3_right_jacobian_inv_batch,
)
from .preintegration import ImuNoiseSpec, PreintegratedDelta, bias_walk_covariance
from .state import BA, BG, POS, ROT, STATE_DIM, VEL, NavState

Key = int


class FactorKind(str, enum.Enum):
    PRIOR = "Prior"
    IMU = "Imu"
    GNSS = "GnssUnary"
    LIDAR_BETWEEN = "LidarBetween"
    LIDAR_UNARY = "LidarUnary"


class NoiseModel:
    """Gaussian noise with cached square-root information ``W`` (``W^T W = cov^-1``).

    ``robust`` is an optional loss hook ``rho'(s)`` evaluated on the squared
    whitened norm; it returns the IRLS weight. Off by default.
    """

    def __init__(self, covariance: np.ndarray, robust: Callable[[float], float] | None = None):
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() <= 1e-15:
            raise ValueError("covariance is not invertible")
        self.covariance = cov
        self.sqrt_info = np.linalg.inv(np.linalg.cholesky(cov))
        self.robust = robust

    @staticmethod
    def diagonal(sigmas) -> NoiseModel:
        return NoiseModel(np.diag(np.square(np.asarray(sigmas, dtype=float))))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self.sqrt_info @ r

    def cost(self, r: np.ndarray) -> float:
        e = self.sqrt_info @ r
        return float(e @ e)


def huber(k: float) -> Callable[[float], float]:
    """IRLS weight for a Huber loss with threshold ``k`` (whitened units)."""

    def weight(s: float) -> float:
        n = np.sqrt(s)
        return 1.0 if n <= k else k / n

    return weight


def _pose_jacobian_map(R: np.ndarray) -> np.ndarray:
    # d(SE3 right twist) / d(state rot, state pos): [phi; R^T dp]
    M = np.zeros((6, STATE_DIM))
    M[:3, ROT] = np.eye(3)
    M[3:, POS] = R.T
    return M


# --------------------------------------------------------------------------- IMU


def imu_residual(
    state_i: NavState, state_j: NavState, delta: PreintegratedDelta, gravity: np.ndarray, jacobians: bool = True
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Preintegration residual ``[r_dR, r_dv, r_dp]`` and its Jacobians
    (9x15 each) with respect to ``state_i`` and ``state_j``.

    ``delta`` is corrected to the biases of ``state_i`` internally.
    """
    T = delta.dt
    if not T > 0:
        raise ValueError("preintegrated delta must span a positive time")
    g = np.asarray(gravity, dtype=float)
    dbg = state_i.bg - delta.bias_linpoint.bg
    dba = state_i.ba - delta.bias_linpoint.ba
    dR = delta.dR @ so3_exp(delta.J_R_bg @ dbg)
    dv = delta.dv + delta.J_v_bg @ dbg + delta.J_v_ba @ dba
    dp = delta.dp + delta.J_p_bg @ dbg + delta.J_p_ba @ dba
    Ri, Rj = state_i.R, state_j.R
    RiT = Ri.T

    E = dR.T @ RiT @ Rj
    r_R = so3_log(E)
    dv_w = state_j.v - state_i.v - g * T
    dp_w = state_j.p - state_i.p - state_i.v * T - 0.5 * g * T * T
    r_v = RiT @ dv_w - dv
    r_p = RiT @ dp_w - dp
    r = np.concatenate([r_R, r_v, r_p])
    if not jacobians:
        return r, None, None

    Jrinv = so3_right_jacobian_inv(r_R)
    Ji = np.zeros((9, STATE_DIM))
    Jj = np.zeros((9, STATE_DIM))
    Ji[0:3, ROT] = -Jrinv @ Rj.T @ Ri
    Ji[3:6, ROT] = skew(RiT @ dv_w)
    Ji[6:9, ROT] = skew(RiT @ dp_w)
    Ji[3:6, VEL] = -RiT
    Ji[6:9, VEL] = -RiT * T
    Ji[6:9, POS] = -RiT
    Ji[0:3, BG] = -Jrinv @ E.T @ so3_right_jacobian(delta.J_R_bg @ dbg) @ delta.J_R_bg
    Ji[3:6, BG] = -delta.J_v_bg
    Ji[6:9, BG] = -delta.J_p_bg
    Ji[3:6, BA] = -delta.J_v_ba
    Ji[6:9, BA] = -delta.J_p_ba
    Jj[0:3, ROT] = Jrinv
    Jj[3:6, VEL] = RiT
    Jj[6:9, POS] = RiT
    return r, Ji, Jj


def bias_walk_residual(state_i: NavState, state_j: NavState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.concatenate([state_j.bg - state_i.bg, state_j.ba - state_i.ba])
    Ji = np.zeros((6, STATE_DIM))
    Jj = np.zeros((6, STATE_DIM))
    Ji[:, 9:15] = -np.eye(6)
    Jj[:, 9:15] = np.eye(6)
    return r, Ji, Jj


# --------------------------------------------------------------------------- GNSS


def antenna_to_imu(p_WG: np.ndarray, R_WG: np.ndarray, p_GI: np.ndarray) -> np.ndarray:
    """IMU position from an antenna fix and the antenna-to-IMU lever arm."""
    return np.asarray(p_WG, dtype=float) + np.asarray(R_WG, dtype=float) @ np.asarray(p_GI, dtype=float)


def gnss_residual(state: NavState, p_WI_meas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``r = p_WI - p~_WI``; Jacobian is identity on the position block."""
    J = np.zeros((3, STATE_DIM))
    J[:, POS] = np.eye(3)
    return state.p - np.asarray(p_WI_meas, dtype=float), J


# --------------------------------------------------------------------------- lidar


def lidar_between_residual(
    state_i: NavState, state_j: NavState, T_meas: Pose3, T_IL: Pose3
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Relative lidar pose residual on SE(3).

    Prediction ``h = (T_WI_i T_IL)^-1 (T_WI_j T_IL)``, residual ``Log(h^-1 T_meas)``.
    """
    A = state_i.pose.compose(T_IL)
    B = state_j.pose.compose(T_IL)
    E = B.inverse().compose(A).compose(T_meas)
    r = se3_log(E)
    Jrinv = se3_right_jacobian_inv(r)
    Ad_LI = T_IL.inverse().adjoint()
    dxi_i = Jrinv @ T_meas.inverse().adjoint() @ Ad_LI
    dxi_j = -Jrinv @ E.inverse().adjoint() @ Ad_LI
    return r, dxi_i @ _pose_jacobian_map(state_i.R), dxi_j @ _pose_jacobian_map(state_j.R)


def pseudo_global_measurement(T_WI_anchor: Pose3, T_L_anchor: Pose3, T_L_now: Pose3) -> Pose3:
    """World pose implied by chaining the anchor with lidar motion since the anchor."""
    return T_WI_anchor.compose(T_L_anchor.inverse().compose(T_L_now))


def lidar_unary_residual(state: NavState, T_meas: Pose3) -> tuple[np.ndarray, np.ndarray]:
    """``r = Log(T_WI^-1 T_meas)`` with its 6x15 Jacobian."""
    E = state.pose.inverse().compose(T_meas)
    r = se3_log(E)
    dxi = -se3_right_jacobian_inv(r) @ E.inverse().adjoint()
    return r, dxi @ _pose_jacobian_map(state.R)


def lidar_unary_noise(sigma_rot: float, sigma_trans: float, roll_pitch_inflation: float = 100.0) -> NoiseModel:
    """Diagonal pose noise with the roll/pitch variances multiplied by
    ``roll_pitch_inflation``; tangent order ``[rx, ry, rz, tx, ty, tz]``."""
    var = np.array([sigma_rot**2] * 3 + [sigma_trans**2] * 3)
    var[0:2] *= roll_pitch_inflation
    return NoiseModel(np.diag(var))


# --------------------------------------------------------------------------- prior


def prior_residual(state: NavState | Pose3, mean: NavState | Pose3) -> tuple[np.ndarray, np.ndarray]:
    """``r = local(mean, state)``. A :class:`Pose3` mean constrains only the
    rotation/position blocks of a :class:`NavState`."""
    if isinstance(mean, Pose3):
        pose = state if isinstance(state, Pose3) else state.pose
        r = mean.local(pose)
        J = np.zeros((6, 6 if isinstance(state, Pose3) else STATE_DIM))
        J[:3, :3] = so3_right_jacobian_inv(r[:3])
        J[3:, 3:6] = np.eye(3)
        return r, J
    r = mean.local(state)
    J = np.eye(STATE_DIM)
    J[ROT, ROT] = so3_right_jacobian_inv(r[ROT])
    return r, J


# --------------------------------------------------------------------------- factor containers


class Factor:
    """A residual over ``keys`` with a Gaussian noise model."""

    kind: FactorKind
    arity: int
    dim: int

    def __init__(self, keys: Sequence[Key], noise: NoiseModel):
        keys = tuple(int(k) for k in keys)
        if len(keys) != self.arity:
            raise ValueError(f"{self.kind.value} factor takes {self.arity} keys, got {len(keys)}")
        if noise.dim != self.dim:
            raise ValueError(f"{self.kind.value} factor expects {self.dim}-dim noise, got {noise.dim}")
        self.keys = keys
        self.noise = noise

    def evaluate(self, values: Mapping[Key, NavState]) -> tuple[np.ndarray, list[np.ndarray]]:
        raise NotImplementedError

    def residual(self, values: Mapping[Key, NavState]) -> np.ndarray:
        """Residual only; subclasses override when Jacobians are costly."""
        return self.evaluate(values)[0]

    def cost(self, values: Mapping[Key, NavState]) -> float:
        s = self.noise.cost(self.residual(values))
        if self.noise.robust is not None:
            s *= self.noise.robust(s)
        return s

    def linearize(self, values: Mapping[Key, NavState]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Whitened residual and whitened Jacobian blocks (one per key)."""
        r, Js = self.evaluate(values)
        W = self.noise.sqrt_info
        e = W @ r
        if self.noise.robust is not None:
            w = np.sqrt(self.noise.robust(float(e @ e)))
            W = W * w
            e = e * w
        return e, [W @ J for J in Js]

    @classmethod
    def linearize_many(cls, factors: Sequence[Factor], values: Mapping[Key, NavState]) -> tuple[np.ndarray, list[np.ndarray]]:
        """Stacked :meth:`linearize` for factors of one class and dimension:
        errors ``(n, dim)`` and one ``(n, dim, 15)`` array per key slot."""
        out = [f.linearize(values) for f in factors]
        E = np.array([e for e, _ in out])
        return E, [np.array([Js[i] for _, Js in out]) for i in range(cls.arity)]

    @classmethod
    def cost_many(cls, factors: Sequence[Factor], values: Mapping[Key, NavState]) -> float:
        return float(sum(f.cost(values) for f in factors))

    def describe(self) -> str:
        return ""

    def __repr__(self) -> str:
        return f"{type(self).__name__}{self.keys}"


class PriorFactor(Factor):
    kind = FactorKind.PRIOR
    arity = 1

    def __init__(self, key: Key, mean: NavState | Pose3, noise: NoiseModel):
        self.dim = 6 if isinstance(mean, Pose3) else STATE_DIM
        super().__init__((key,), noise)
        self.mean = mean

    def evaluate(self, values):
        r, J = prior_residual(values[self.keys[0]], self.mean)
        return r, [J]

    def describe(self) -> str:
        m = self.mean if isinstance(self.mean, Pose3) else self.mean.pose
        return " ".join(f"{x:.17g}" for x in m.t)


class ImuFactor(Factor):
    """Preintegration residual (9) stacked with the bias random walk (6)."""

    kind = FactorKind.IMU
    arity = 2
    dim = 15

    def __init__(self, key_i: Key, key_j: Key, delta: PreintegratedDelta, noise_spec: ImuNoiseSpec, gravity):
        cov = np.zeros((15, 15))
        cov[:9, :9] = delta.cov
        cov[9:, 9:] = bias_walk_covariance(delta.dt, noise_spec)
        super().__init__((key_i, key_j), NoiseModel(cov))
        self.delta = delta
        self.noise_spec = noise_spec
        self.gravity = np.asarray(gravity, dtype=float)

    def evaluate(self, values):
        si, sj = values[self.keys[0]], values[self.keys[1]]
        r9, Ji9, Jj9 = imu_residual(si, sj, self.delta, self.gravity)
        rb, Jib, Jjb = bias_walk_residual(si, sj)
        return np.concatenate([r9, rb]), [np.vstack([Ji9, Jib]), np.vstack([Jj9, Jjb])]

    def residual(self, values):
        si, sj = values[self.keys[0]], values[self.keys[1]]
        r9, _, _ = imu_residual(si, sj, self.delta, self.gravity, jacobians=False)
        return np.concatenate([r9, sj.bg - si.bg, sj.ba - si.ba])

    @classmethod
    def _batchable(cls, factors) -> bool:
        g = factors[0].gravity
        return all(f.noise.robust is None and np.array_equal(f.gravity, g) for f in factors)

    @classmethod
    def linearize_many(cls, factors, values):
        if not cls._batchable(factors):
            return super().linearize_many(factors, values)
        return _imu_batch(factors, values, True)

    @classmethod
    def cost_many(cls, factors, values):
        if not cls._batchable(factors):
            return super().cost_many(factors, values)
        E = _imu_batch(factors, values, False)
        return float(np.sum(E * E))

    def describe(self) -> str:
        return f"{self.delta.dt:.17g}"


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", A, x)


def _imu_batch(factors: Sequence[ImuFactor], values: Mapping[Key, NavState], jacobians: bool):
    """Vectorised :class:`ImuFactor` linearisation; same formulas as :func:`imu_residual`."""
    si = [values[f.keys[0]] for f in factors]
    sj = [values[f.keys[1]] for f in factors]
    ds = [f.delta for f in factors]
    Ri = np.array([s.R for s in si])
    Rj = np.array([s.R for s in sj])
    pi, vi, bgi, bai = (np.array([getattr(s, a) for s in si]) for a in ("p", "v", "bg", "ba"))
    pj, vj, bgj, baj = (np.array([getattr(s, a) for s in sj]) for a in ("p", "v", "bg", "ba"))
    T = np.array([d.dt for d in ds])
    if not np.all(T > 0):
        raise ValueError("preintegrated delta must span a positive time")
    JRbg, Jvbg, Jvba, Jpbg, Jpba = (np.array([getattr(d, a) for d in ds]) for a in ("J_R_bg", "J_v_bg", "J_v_ba", "J_p_bg", "J_p_ba"))
    dbg = bgi - np.array([d.bias_linpoint.bg for d in ds])
    dba = bai - np.array([d.bias_linpoint.ba for d in ds])
    g = factors[0].gravity
    phi_b = _mv(JRbg, dbg)
    dR = np.array([d.dR for d in ds]) @ so3_exp_batch(phi_b)
    dv = np.array([d.dv for d in ds]) + _mv(Jvbg, dbg) + _mv(Jvba, dba)
    dp = np.array([d.dp for d in ds]) + _mv(Jpbg, dbg) + _mv(Jpba, dba)
    RiT = Ri.transpose(0, 2, 1)
    E = dR.transpose(0, 2, 1) @ RiT @ Rj
    rR = so3_log_batch(E)
    Tc = T[:, None]
    dv_w = vj - vi - g * Tc
    dp_w = pj - pi - vi * Tc - 0.5 * g * Tc * Tc
    a_v = _mv(RiT, dv_w)
    a_p = _mv(RiT, dp_w)
    r = np.concatenate([rR, a_v - dv, a_p - dp, bgj - bgi, baj - bai], axis=1)
    W = np.array([f.noise.sqrt_info for f in factors])
    e = _mv(W, r)
    if not jacobians:
        return e
    n = len(factors)
    Jrinv = so3_right_jacobian_inv_batch(rR)
    Ji = np.zeros((n, 15, STATE_DIM))
    Jj = np.zeros((n, 15, STATE_DIM))
    Ji[:, 0:3, ROT] = -Jrinv @ Rj.transpose(0, 2, 1) @ Ri
    Ji[:, 3:6, ROT] = skew_batch(a_v)
    Ji[:, 6:9, ROT] = skew_batch(a_p)
    Ji[:, 3:6, VEL] = -RiT
    Ji[:, 6:9, VEL] = -RiT * T[:, None, None]
    Ji[:, 6:9, POS] = -RiT
    Ji[:, 0:3, BG] = -Jrinv @ E.transpose(0, 2, 1) @ so3_right_jacobian_batch(phi_b) @ JRbg
    Ji[:, 3:6, BG] = -Jvbg
    Ji[:, 6:9, BG] = -Jpbg
    Ji[:, 3:6, BA] = -Jvba
    Ji[:, 6:9, BA] = -Jpba
    Ji[:, 9:15, 9:15] = -np.eye(6)
    Jj[:, 0:3, ROT] = Jrinv
    Jj[:, 3:6, VEL] = RiT
    Jj[:, 6:9, POS] = RiT
    Jj[:, 9:15, 9:15] = np.eye(6)
    return e, [W @ Ji, W @ Jj]


class GnssFactor(Factor):
    kind = FactorKind.GNSS
    arity = 1
    dim = 3

    def __init__(self, key: Key, p_WI_meas: np.ndarray, noise: NoiseModel):
        super().__init__((key,), noise)
        self.measurement = np.asarray(p_WI_meas, dtype=float)

    def evaluate(self, values):
        r, J = gnss_residual(values[self.keys[0]], self.measurement)
        return r, [J]

    def describe(self) -> str:
        return " ".join(f"{x:.17g}" for x in self.measurement)

    @classmethod
    def linearize_many(cls, factors, values):
        if any(f.noise.robust is not None for f in factors):
            return super().linearize_many(factors, values)
        r = np.array([values[f.keys[0]].p - f.measurement for f in factors])
        W = np.array([f.noise.sqrt_info for f in factors])
        J = np.zeros((len(factors), 3, STATE_DIM))
        J[:, :, POS] = W
        return _mv(W, r), [J]

    @classmethod
    def cost_many(cls, factors, values):
        if any(f.noise.robust is not None for f in factors):
            return super().cost_many(factors, values)
        E = cls.linearize_many(factors, values)[0]
        return float(np.sum(E * E))


class LidarBetweenFactor(Factor):
    kind = FactorKind.LIDAR_BETWEEN
    arity = 2
    dim = 6

    def __init__(self, key_i: Key, key_j: Key, T_meas: Pose3, T_IL: Pose3, noise: NoiseModel):
        super().__init__((key_i, key_j), noise)
        self.measurement = T_meas
        self.T_IL = T_IL

    def evaluate(self, values):
        r, Ji, Jj = lidar_between_residual(values[self.keys[0]], values[self.keys[1]], self.measurement, self.T_IL)
        return r, [Ji, Jj]

    def describe(self) -> str:
        return " ".join(f"{x:.17g}" for x in self.measurement.t)

    @classmethod
    def linearize_many(cls, factors, values):
        if any(f.noise.robust is not None for f in factors):
            return super().linearize_many(factors, values)
        return _lidar_between_batch(factors, values)

    @classmethod
    def cost_many(cls, factors, values):
        if any(f.noise.robust is not None for f in factors):
            return super().cost_many(factors, values)
        E = _lidar_between_batch(factors, values)[0]
        return float(np.sum(E * E))


def _lidar_between_batch(factors: Sequence[LidarBetweenFactor], values: Mapping[Key, NavState]):
    """Vectorised :func:`lidar_between_residual` with whitening."""
    n = len(factors)
    si = [values[f.keys[0]] for f in factors]
    sj = [values[f.keys[1]] for f in factors]
    Ri = np.array([s.R for s in si])
    Rj = np.array([s.R for s in sj])
    pi = np.array([s.p for s in si])
    pj = np.array([s.p for s in sj])
    R_IL = np.array([f.T_IL.R for f in factors])
    t_IL = np.array([f.T_IL.t for f in factors])
    RM = np.array([f.measurement.R for f in factors])
    tM = np.array([f.measurement.t for f in factors])
    RA = Ri @ R_IL
    tA = _mv(Ri, t_IL) + pi
    RB = Rj @ R_IL
    tB = _mv(Rj, t_IL) + pj
    RBT = RB.transpose(0, 2, 1)
    RE = RBT @ RA @ RM
    tE = _mv(RBT, _mv(RA, tM) + tA - tB)
    r = se3_log_batch(RE, tE)
    Jrinv = se3_right_jacobian_inv_batch(r)
    R_LI = R_IL.transpose(0, 2, 1)
    Ad_LI = adjoint_batch(R_LI, -_mv(R_LI, t_IL))
    RMT = RM.transpose(0, 2, 1)
    RET = RE.transpose(0, 2, 1)
    dxi_i = Jrinv @ adjoint_batch(RMT, -_mv(RMT, tM)) @ Ad_LI
    dxi_j = -Jrinv @ adjoint_batch(RET, -_mv(RET, tE)) @ Ad_LI
    Ji = np.zeros((n, 6, STATE_DIM))
    Jj = np.zeros((n, 6, STATE_DIM))
    Ji[:, :, ROT] = dxi_i[:, :, :3]
    Ji[:, :, POS] = dxi_i[:, :, 3:] @ Ri.transpose(0, 2, 1)
    Jj[:, :, ROT] = dxi_j[:, :, :3]
    Jj[:, :, POS] = dxi_j[:, :, 3:] @ Rj.transpose(0, 2, 1)
    W = np.array([f.noise.sqrt_info for f in factors])
    return _mv(W, r), [W @ Ji, W @ Jj]


class LidarUnaryFactor(Factor):
    kind = FactorKind.LIDAR_UNARY
    arity = 1
    dim = 6

    def __init__(self, key: Key, T_WI_meas: Pose3, noise: NoiseModel):
        super().__init__((key,), noise)
        self.measurement = T_WI_meas

    def evaluate(self, values):
        r, J = lidar_unary_residual(values[self.keys[0]], self.measurement)
        return r, [J]

    def describe(self) -> str:
        return " ".join(f"{x:.17g}" for x in self.measurement.t)

