"""State types and the residual/Jacobian kernels of the factor graph.

All kernels are batched: state fields may carry a leading axis and every
output gains the same axis. Error-state conventions:

- per inertial state ``[dp(3), dtheta(3), dv(3), dba(3), dbg(3)]`` with
  ``p += dp``, ``q = q ⊗ Exp(dtheta)``;
- extrinsics ``[dp_MI(3), dtheta_MI(3)]`` with ``q_MI = q_MI ⊗ Exp(dtheta_MI)``;
- offset knots additive, gravity as ``(roll, pitch)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .preintegration import GRAVITY, Preintegration, corrected_terms

STATE_DIM = 15
P, TH, V, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


def _mv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def _tr(M):
    return np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class InertialState:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    ba: np.ndarray
    bg: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, idx) -> "InertialState":
        return InertialState(self.t[idx], self.p[idx], self.v[idx], self.q[idx], self.ba[idx], self.bg[idx])

    @property
    def pose(self) -> geo.Pose:
        return geo.Pose(self.q, self.p)

    def retract(self, d: np.ndarray) -> "InertialState":
        return InertialState(
            self.t,
            self.p + d[..., P],
            self.v + d[..., V],
            geo.quat_mul(self.q, geo.so3_exp(d[..., TH])),
            self.ba + d[..., BA],
            self.bg + d[..., BG],
        )


@dataclass(frozen=True)
class ExtrinsicState:
    p_MI: np.ndarray
    q_MI: np.ndarray
    offset_t: np.ndarray  # knot times (IMU clock)
    offset: np.ndarray  # t_MI at the knots

    @property
    def n_offsets(self) -> int:
        return len(self.offset_t)

    def retract(self, d: np.ndarray) -> "ExtrinsicState":
        return ExtrinsicState(
            self.p_MI + d[0:3],
            geo.quat_mul(self.q_MI, geo.so3_exp(d[3:6])),
            self.offset_t,
            self.offset + d[6:6 + self.n_offsets],
        )


@dataclass(frozen=True)
class GravityAlign:
    roll: float
    pitch: float

    @property
    def g_W(self) -> np.ndarray:
        return gravity_vector(self.roll, self.pitch)

    def retract(self, d: np.ndarray) -> "GravityAlign":
        return GravityAlign(float(self.roll + d[0]), float(self.pitch + d[1]))


def gravity_vector(roll, pitch) -> np.ndarray:
    """``Rx(roll) Ry(pitch) (0, 0, 9.81)``."""
    sr, cr, sp, cp = np.sin(roll), np.cos(roll), np.sin(pitch), np.cos(pitch)
    return GRAVITY * np.array([sp, -sr * cp, cr * cp])


def gravity_jacobian(roll, pitch) -> np.ndarray:
    """d g_W / d(roll, pitch), shape (3, 2)."""
    sr, cr, sp, cp = np.sin(roll), np.cos(roll), np.sin(pitch), np.cos(pitch)
    return GRAVITY * np.array([[0.0, cp], [-cr * cp, sr * sp], [-sr * cp, -cr * sp]])


# ---------------------------------------------------------------- IMU


def imu_residual(s0: InertialState, s1: InertialState, gravity: GravityAlign, preint: Preintegration,
                 jacobians: bool = False):
    """9-vector ``(r_p, r_v, r_q)`` between consecutive states (unwhitened).

    With ``jacobians`` also returns ``(J0, J1, Jg)`` of shapes (..., 9, 15),
    (..., 9, 15), (..., 9, 2).
    """
    g = gravity.g_W
    dt = np.asarray(preint.dt, dtype=float)[..., None]
    alpha, beta, gam = corrected_terms(preint, s0.ba, s0.bg)
    Rt = _tr(geo.quat_to_rotmat(s0.q))
    xp = s1.p - s0.p - s0.v * dt + 0.5 * g * dt**2
    xv = s1.v - s0.v + g * dt
    yp = _mv(Rt, xp)
    yv = _mv(Rt, xv)
    M = geo.quat_mul(geo.quat_conj(s0.q), s1.q)
    E = geo._quat_product(geo.quat_conj(gam), M)
    r = np.concatenate([yp - alpha, yv - beta, 2.0 * E[..., 1:]], axis=-1)
    if not jacobians:
        return r

    shape = r.shape[:-1]
    J0 = np.zeros(shape + (9, STATE_DIM))
    J1 = np.zeros(shape + (9, STATE_DIM))
    Jb = preint.bias_jacobians
    d = dt[..., None]
    J0[..., 0:3, P] = -Rt
    J0[..., 0:3, TH] = geo.skew(yp)
    J0[..., 0:3, V] = -Rt * d
    J0[..., 0:3, BA] = -Jb[..., 0:3, 0:3]
    J0[..., 0:3, BG] = -Jb[..., 0:3, 3:6]
    J0[..., 3:6, TH] = geo.skew(yv)
    J0[..., 3:6, V] = -Rt
    J0[..., 3:6, BA] = -Jb[..., 3:6, 0:3]
    J0[..., 3:6, BG] = -Jb[..., 3:6, 3:6]
    J1[..., 0:3, P] = Rt
    J1[..., 3:6, V] = Rt

    gam_inv = geo.quat_conj(gam)
    J0[..., 6:9, TH] = -(geo.quat_left_matrix(gam_inv) @ geo.quat_right_matrix(M))[..., 1:, 1:]
    J1[..., 6:9, TH] = geo.quat_left_matrix(E)[..., 1:, 1:]
    # gam = dq ⊗ Exp(J dbg): dE/dbg through the right Jacobian of -J dbg
    Jtg = Jb[..., 6:9, 3:6]
    a = -_mv(Jtg, np.asarray(s0.bg) - preint.lin_bias_g)
    dq_inv_M = geo._quat_product(geo.quat_conj(preint.dq), M)
    A = (geo.quat_left_matrix(geo.so3_exp(a)) @ geo.quat_right_matrix(dq_inv_M))[..., 1:, 1:]
    J0[..., 6:9, BG] = -A @ geo.so3_right_jacobian(a) @ Jtg

    dg = gravity_jacobian(gravity.roll, gravity.pitch)
    Jg = np.zeros(shape + (9, 2))
    Jg[..., 0:3, :] = 0.5 * d**2 * (Rt @ dg)
    Jg[..., 3:6, :] = d * (Rt @ dg)
    return r, (J0, J1, Jg)


def bias_residuals(s0: InertialState, s1: InertialState, dt, accel_random_walk: float, gyro_random_walk: float,
                   jacobians: bool = False):
    """Whitened bias random-walk residual ``(b1 - b0) / (density sqrt(dt))``."""
    dt = np.asarray(dt, dtype=float)[..., None]
    sa = accel_random_walk * np.sqrt(dt)
    sg = gyro_random_walk * np.sqrt(dt)
    r = np.concatenate([(s1.ba - s0.ba) / sa, (s1.bg - s0.bg) / sg], axis=-1)
    if not jacobians:
        return r
    shape = r.shape[:-1]
    J1 = np.zeros(shape + (6, STATE_DIM))
    eye = np.eye(3)
    J1[..., 0:3, BA] = eye / sa[..., None]
    J1[..., 3:6, BG] = eye / sg[..., None]
    return r, (-J1, J1)


# ---------------------------------------------------------------- time offset


def offset_weights(offset_t: np.ndarray, t):
    """Left knot index ``r`` and weight ``lambda`` of the linear offset spline at ``t``."""
    t = np.asarray(t, dtype=float)
    m = len(offset_t)
    if m == 1:
        return np.zeros(t.shape, dtype=int), np.zeros(t.shape)
    r = np.clip(np.searchsorted(offset_t, t, side="right") - 1, 0, m - 2)
    lam = np.clip((t - offset_t[r]) / (offset_t[r + 1] - offset_t[r]), 0.0, 1.0)
    return r, lam


def offset_at(extr: ExtrinsicState, t) -> np.ndarray:
    r, lam = offset_weights(extr.offset_t, t)
    if extr.n_offsets == 1:
        return np.full(np.shape(t), float(extr.offset[0]))
    return (1.0 - lam) * extr.offset[r] + lam * extr.offset[r + 1]


def mocap_tau(s: InertialState, extr: ExtrinsicState) -> np.ndarray:
    return np.asarray(s.t, dtype=float) + offset_at(extr, s.t)


# ---------------------------------------------------------------- MoCap


def _measurement_jacobian(q_meas, X):
    """d r_q / d q_meas (..., 3, 4) for ``r_q = 2 vec(q_meas^-1 ⊗ X)``."""
    conj = np.array([1.0, -1.0, -1.0, -1.0])
    return 2.0 * geo.quat_right_matrix(X)[..., 1:, :] * conj


def mocap_residual(s: InertialState, extr: ExtrinsicState, spline, jacobians: bool = False):
    """6-vector ``(r_p, r_q)`` against the spline at ``tau = t + t_MI(t)`` (unwhitened).

    With ``jacobians`` also returns ``(J_state (..., 6, 15), J_ext (..., 6, 6),
    J_off (..., 6, 2), r_idx)`` where the offset columns act on knots
    ``r_idx`` and ``r_idx + 1``.
    """
    tau = mocap_tau(s, extr)
    if jacobians:
        T_meas, Vb = spline.pose_and_twist(tau)
    else:
        T_meas = spline.evaluate(tau)
    T_meas = geo.Pose(np.reshape(T_meas.q, np.shape(s.q)), np.reshape(T_meas.p, np.shape(s.p)))
    R = geo.quat_to_rotmat(s.q)
    R_MI = geo.quat_to_rotmat(extr.q_MI)
    y = R_MI.T @ extr.p_MI
    q_MI_inv = geo.quat_conj(extr.q_MI)
    X = geo.quat_mul(s.q, q_MI_inv)
    E = geo._quat_product(geo.quat_conj(T_meas.q), X)
    r = np.concatenate([s.p - _mv(R, y) - T_meas.p, 2.0 * E[..., 1:]], axis=-1)
    if not jacobians:
        return r

    shape = r.shape[:-1]
    Js = np.zeros(shape + (6, STATE_DIM))
    Js[..., 0:3, P] = np.eye(3)
    Js[..., 0:3, TH] = R @ geo.skew(y)
    B = (geo.quat_left_matrix(geo._quat_product(geo.quat_conj(T_meas.q), s.q)) @ geo.quat_right_matrix(q_MI_inv))[..., 1:, 1:]
    Js[..., 3:6, TH] = B
    Je = np.zeros(shape + (6, 6))
    Je[..., 0:3, 0:3] = -R @ R_MI.T
    Je[..., 0:3, 3:6] = -R @ geo.skew(y)
    Je[..., 3:6, 3:6] = -B
    Joff, r_idx = _offset_columns(s, extr, T_meas, Vb.reshape(shape + (6,)), X)
    return r, (Js, Je, Joff, r_idx)


def _offset_columns(s, extr, T_meas, Vb, X):
    p_dot = geo.quat_rotate(T_meas.q, Vb[..., :3])
    w = np.concatenate([np.zeros(Vb.shape[:-1] + (1,)), Vb[..., 3:]], axis=-1)
    q_dot = 0.5 * geo._quat_product(T_meas.q, w)
    d_tau = np.concatenate([-p_dot, _mv(_measurement_jacobian(T_meas.q, X), q_dot)], axis=-1)
    r_idx, lam = offset_weights(extr.offset_t, s.t)
    lam = np.asarray(lam)[..., None]
    Joff = np.stack([d_tau * (1.0 - lam), d_tau * lam], axis=-1)
    return Joff, r_idx


def time_offset_jacobian(s: InertialState, extr: ExtrinsicState, spline) -> np.ndarray:
    """d r_M / d(t_MI_r, t_MI_{r+1}) as the chain (residual vs measurement)(spline rate)(1 - lambda, lambda)."""
    return mocap_residual(s, extr, spline, jacobians=True)[1][2]


__all__ = [
    "STATE_DIM",
    "InertialState",
    "ExtrinsicState",
    "GravityAlign",
    "gravity_vector",
    "gravity_jacobian",
    "imu_residual",
    "bias_residuals",
    "offset_weights",
    "offset_at",
    "mocap_tau",
    "mocap_residual",
    "time_offset_jacobian",
]
