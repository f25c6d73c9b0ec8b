"""SO(3) / SE(3) helpers used by every residual, retraction and Jacobian.

Conventions
-----------
* Rotations are 3x3 orthonormal numpy arrays (``R_AB`` maps vectors from B to A).
* Tangent vectors are ordered rotation first: ``[phi; rho]`` for SE(3).
* Pose perturbations used by the solver act on the right for rotation and
  additively (world frame) for translation, see :meth:`Pose3.retract`.
* Pose residuals use the SE(3) logarithm, see :func:`se3_log`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
# Coefficients like (t - sin t) / t^3 cancel catastrophically long before 1e-8.
_SERIES_ANGLE = 1e-3

_I3 = np.eye(3)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """One Newton step of the polar decomposition; cheap and enough to keep
    ``R^T R`` at machine precision when applied after every product."""
    return 1.5 * R - 0.5 * R @ (R.T @ R)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula, 2nd-order Taylor expansion below ``SMALL_ANGLE``."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < SMALL_ANGLE * SMALL_ANGLE:
        return _I3 + K + 0.5 * (K @ K)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return _I3 + a * K + b * (K @ K)


def _tie_break(axis: np.ndarray) -> np.ndarray:
    # Rotation by pi: +axis and -axis are both valid logs. Keep the one whose
    # first non-negligible component is positive.
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal logarithm, angle in [0, pi].

    At exactly pi the axis comes from the dominant column of ``R + R^T``
    (equivalently ``R + I``) and the sign is fixed by :func:`_tie_break`.
    """
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)))
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = math.sqrt(float(w @ w))
    theta = math.atan2(sin_t, cos_t)
    if theta < 1e-4:
        return w * (1.0 + theta * theta / 6.0)
    if cos_t > -0.9:
        return w * (theta / sin_t)
    # near pi: sin_t is tiny, recover the axis from the symmetric part
    S = 0.5 * (R + R.T) - cos_t * _I3
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / math.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if sin_t > 1e-12:
        if axis @ w < 0:
            axis = -axis
    else:
        axis = _tie_break(axis)
    return theta * axis


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""
    theta2 = float(phi @ phi)
    K = skew(phi)
    if theta2 < _SERIES_ANGLE**2:
        return _I3 - (0.5 - theta2 / 24.0) * K + (1.0 / 6.0 - theta2 / 120.0) * (K @ K)
    theta = math.sqrt(theta2)
    return _I3 - (1.0 - math.cos(theta)) / theta2 * K + (theta - math.sin(theta)) / (theta2 * theta) * (K @ K)


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    K = skew(phi)
    if theta2 < _SERIES_ANGLE**2:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return _I3 + 0.5 * K + c * (K @ K)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


def rot_x(a: float) -> np.ndarray:
    return so3_exp(np.array([a, 0.0, 0.0]))


def rot_y(a: float) -> np.ndarray:
    return so3_exp(np.array([0.0, a, 0.0]))


def rot_z(a: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, a]))


def quat_from_rot(R: np.ndarray) -> np.ndarray:
    """Hamilton quaternion ``[qx, qy, qz, qw]`` with ``qw >= 0``."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rot_from_quat(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# --------------------------------------------------------------------------- batched SO(3)
# Stacked (n, 3) / (n, 3, 3) versions of the helpers above, used by the solver
# to evaluate many factors at once. Same formulas and branch thresholds.


def skew_batch(v: np.ndarray) -> np.ndarray:
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ni,ni->n", omega, omega)
    K = skew_batch(omega)
    KK = K @ K
    small = theta2 < SMALL_ANGLE * SMALL_ANGLE
    theta = np.sqrt(theta2)
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return _I3 + a[:, None, None] * K + b[:, None, None] * KK


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    cos_t = np.clip(0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0), -1.0, 1.0)
    w = 0.5 * np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    sin_t = np.sqrt(np.einsum("ni,ni->n", w, w))
    theta = np.arctan2(sin_t, cos_t)
    small = theta < 1e-4
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, sin_t))
    out = w * scale[:, None]
    for i in np.flatnonzero(cos_t <= -0.9):
        out[i] = so3_log(R[i])
    return out


def so3_right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ni,ni->n", phi, phi)
    K = skew_batch(phi)
    small = theta2 < _SERIES_ANGLE**2
    theta = np.sqrt(np.where(small, 1.0, theta2))
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / (theta * theta))
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / theta**3)
    return _I3 - a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_right_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ni,ni->n", phi, phi)
    K = skew_batch(phi)
    small = theta2 < _SERIES_ANGLE**2
    theta = np.sqrt(np.where(small, 1.0, theta2))
    c = np.where(small, 1.0 / 12.0 + theta2 / 720.0, 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)))
    return _I3 + 0.5 * K + c[:, None, None] * (K @ K)


# --------------------------------------------------------------------------- SE(3)


def _se3_q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    # Off-diagonal block of the SE(3) left Jacobian (Barfoot, State Estimation for Robotics).
    P = skew(phi)
    Rh = skew(rho)
    theta2 = float(phi @ phi)
    if theta2 < _SERIES_ANGLE**2:
        a = 1.0 / 6.0 - theta2 / 120.0
        b = 1.0 / 24.0 - theta2 / 720.0
        c = 1.0 / 120.0 - theta2 / 2520.0
    else:
        t = math.sqrt(theta2)
        s, co = math.sin(t), math.cos(t)
        a = (t - s) / (theta2 * t)
        b = (theta2 + 2.0 * co - 2.0) / (2.0 * theta2 * theta2)
        c = (2.0 * t - 3.0 * s + t * co) / (2.0 * theta2 * theta2 * t)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return 0.5 * Rh + a * (PR + RP + PRP) + b * (P @ PR + RP @ P - 3.0 * PRP) + c * (PRP @ P + P @ PRP)


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    phi, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q(phi, rho)
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = -np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ _se3_q(phi, rho) @ Jinv
    return out


def se3_exp(xi: np.ndarray) -> Pose3:
    """``xi = [phi; rho]`` -> pose with ``t = Jl(phi) rho``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError(f"twist must have shape (6,), got {xi.shape}")
    phi, rho = xi[:3], xi[3:]
    return Pose3(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(T: Pose3) -> np.ndarray:
    phi = so3_log(T.R)
    return np.concatenate([phi, so3_left_jacobian_inv(phi) @ T.t])


def _se3_q_batch(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    P = skew_batch(phi)
    Rh = skew_batch(rho)
    theta2 = np.einsum("ni,ni->n", phi, phi)
    small = theta2 < _SERIES_ANGLE**2
    t = np.sqrt(np.where(small, 1.0, theta2))
    t2 = t * t
    s, co = np.sin(t), np.cos(t)
    a = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (t - s) / (t2 * t))
    b = np.where(small, 1.0 / 24.0 - theta2 / 720.0, (t2 + 2.0 * co - 2.0) / (2.0 * t2 * t2))
    c = np.where(small, 1.0 / 120.0 - theta2 / 2520.0, (2.0 * t - 3.0 * s + t * co) / (2.0 * t2 * t2 * t))
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    a, b, c = a[:, None, None], b[:, None, None], c[:, None, None]
    return 0.5 * Rh + a * (PR + RP + PRP) + b * (P @ PR + RP @ P - 3.0 * PRP) + c * (PRP @ P + P @ PRP)


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log_batch(R)
    Jinv = so3_right_jacobian_inv_batch(-phi)
    return np.concatenate([phi, np.einsum("nij,nj->ni", Jinv, t)], axis=1)


def se3_right_jacobian_inv_batch(xi: np.ndarray) -> np.ndarray:
    phi, rho = -xi[:, :3], -xi[:, 3:]
    Jinv = so3_right_jacobian_inv_batch(-phi)
    out = np.zeros((len(xi), 6, 6))
    out[:, :3, :3] = Jinv
    out[:, 3:, 3:] = Jinv
    out[:, 3:, :3] = -Jinv @ _se3_q_batch(phi, rho) @ Jinv
    return out


def adjoint_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    A = np.zeros((len(R), 6, 6))
    A[:, :3, :3] = R
    A[:, 3:, 3:] = R
    A[:, 3:, :3] = skew_batch(t) @ R
    return A


def normalize_rotation_batch(R: np.ndarray) -> np.ndarray:
    return 1.5 * R - 0.5 * R @ (R.transpose(0, 2, 1) @ R)


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform ``T_AB = (R_AB, t_AB)``: ``p_A = R_AB p_B + t_AB``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> Pose3:
        return Pose3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(t) -> Pose3:
        return Pose3(np.eye(3), np.asarray(t, dtype=float))

    def compose(self, other: Pose3) -> Pose3:
        return Pose3(normalize_rotation(self.R @ other.R), self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> Pose3:
        Rt = self.R.T
        return Pose3(Rt, -Rt @ self.t)

    def between(self, other: Pose3) -> Pose3:
        """``self^-1 * other``."""
        Rt = self.R.T
        return Pose3(normalize_rotation(Rt @ other.R), Rt @ (other.t - self.t))

    def act(self, p: np.ndarray) -> np.ndarray:
        return self.R @ p + self.t

    def adjoint(self) -> np.ndarray:
        """``T Exp(xi) T^-1 = Exp(Ad_T xi)`` for rotation-first twists."""
        A = np.zeros((6, 6))
        A[:3, :3] = self.R
        A[3:, 3:] = self.R
        A[3:, :3] = skew(self.t) @ self.R
        return A

    def retract(self, delta: np.ndarray) -> Pose3:
        """Right rotation update, world-frame additive translation."""
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (6,):
            raise ValueError(f"Pose3 tangent must have shape (6,), got {delta.shape}")
        return Pose3(normalize_rotation(self.R @ so3_exp(delta[:3])), self.t + delta[3:])

    def local(self, other: Pose3) -> np.ndarray:
        return np.concatenate([so3_log(self.R.T @ other.R), other.t - self.t])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def almost_equal(self, other: Pose3, tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=tol) and np.allclose(self.t, other.t, atol=tol))

    def __repr__(self) -> str:
        return f"Pose3(rotvec={so3_log(self.R).round(6).tolist()}, t={self.t.round(6).tolist()})"
