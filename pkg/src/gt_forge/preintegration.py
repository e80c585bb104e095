"""Discrete IMU preintegration between state epochs.

The preintegrated quantities are expressed in the body frame at the start of
the interval. With ``g_W`` the (upward) gravity reaction vector and
``R_i = R_WI(t_i)``::

    q_j = q_i ⊗ dq
    v_j = v_i - g_W dt + R_i beta
    p_j = p_i + v_i dt - 0.5 g_W dt^2 + R_i alpha

Integration uses the midpoint rule: consecutive samples are averaged and the
rotation used to map the averaged specific force is propagated to the half
step. Covariance is propagated over the error state ``(dalpha, dbeta,
dtheta)`` with right-multiplicative rotation error; bias Jacobians are
accumulated with the same linearization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo
from .errors import BiasDeltaTooLarge, InsufficientCoverage

GRAVITY = 9.81

# first-order bias correction is trusted below these deltas
MAX_BIAS_DELTA_ACCEL = 0.1
MAX_BIAS_DELTA_GYRO = 0.01


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time IMU noise densities (defaults: consumer-grade MEMS)."""

    accel_noise_density: float = 5.2e-3  # m/s^2/sqrt(Hz)
    accel_random_walk: float = 1.0e-3  # m/s^3/sqrt(Hz)
    gyro_noise_density: float = 2.1e-4  # rad/s/sqrt(Hz)
    gyro_random_walk: float = 1.3e-5  # rad/s^2/sqrt(Hz)

    def __post_init__(self):
        for name in ("accel_noise_density", "accel_random_walk", "gyro_noise_density", "gyro_random_walk"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def scaled(self, factor: float) -> "ImuNoiseParams":
        return ImuNoiseParams(*(factor * x for x in (
            self.accel_noise_density, self.accel_random_walk,
            self.gyro_noise_density, self.gyro_random_walk,
        )))


@dataclass(frozen=True)
class ImuData:
    """A stream of IMU samples on the IMU clock.

    ``accel`` is specific force (m/s^2) and ``gyro`` angular rate (rad/s),
    both in the IMU body frame; one row per timestamp in ``t``.
    """

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        if not (len(t) == len(accel) == len(gyro)):
            raise ValueError("t, accel and gyro must have the same length")
        if len(t) > 1 and np.any(np.diff(t) <= 0.0):
            raise ValueError("IMU timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def nominal_rate(self) -> float:
        return 1.0 / float(np.median(np.diff(self.t)))

    def check_rate(self, nominal: float, tol: float = 0.2) -> bool:
        rate = self.nominal_rate
        ok = abs(rate - nominal) <= tol * nominal
        if not ok:
            warnings.warn(f"IMU rate {rate:.1f} Hz deviates from nominal {nominal:.1f} Hz by more than {tol:.0%}")
        return ok

    def interpolate(self, tq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Linear interpolation of accel and gyro at ``tq`` (held at the ends)."""
        tq = np.asarray(tq, dtype=float)
        k = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        w = np.clip((tq - self.t[k]) / (self.t[k + 1] - self.t[k]), 0.0, 1.0)[..., None]
        acc = (1.0 - w) * self.accel[k] + w * self.accel[k + 1]
        gyr = (1.0 - w) * self.gyro[k] + w * self.gyro[k + 1]
        return acc, gyr


@dataclass(frozen=True)
class Preintegration:
    """Relative motion summary between two epochs.

    Fields may carry a leading batch axis (one entry per interval).
    ``bias_jacobians`` is d(alpha, beta, theta)/d(b_a, b_g), shape (..., 9, 6).
    """

    alpha: np.ndarray
    beta: np.ndarray
    dq: np.ndarray
    dt: np.ndarray
    covariance: np.ndarray
    bias_jacobians: np.ndarray
    lin_bias_a: np.ndarray
    lin_bias_g: np.ndarray

    def __len__(self) -> int:
        return self.alpha.shape[0]

    def __getitem__(self, idx) -> "Preintegration":
        return Preintegration(*(getattr(self, f)[idx] for f in _FIELDS))

    def with_entries(self, idx, other: "Preintegration") -> "Preintegration":
        """Copy with batch entries ``idx`` replaced by ``other``."""
        out = {}
        for f in _FIELDS:
            arr = getattr(self, f).copy()
            arr[idx] = getattr(other, f)
            out[f] = arr
        return Preintegration(**out)


_FIELDS = ("alpha", "beta", "dq", "dt", "covariance", "bias_jacobians", "lin_bias_a", "lin_bias_g")


def step_jacobians(q: np.ndarray, acc_b: np.ndarray, w: np.ndarray, dt: np.ndarray):
    """Linearization of one midpoint step.

    ``q`` is the rotation accumulated so far, ``acc_b`` and ``w`` the
    bias-corrected averaged specific force and angular rate. Returns the
    transition ``F`` (..., 9, 9) and the noise input ``G`` (..., 9, 6) scaled
    so that the step noise enters as ``dt * G @ eta`` with
    ``eta ~ N(0, diag(density^2) / dt)`` over (accel, gyro).
    """
    dt = np.asarray(dt, dtype=float)
    dtheta = w * dt[..., None]
    R_half = geo.quat_to_rotmat(geo.quat_mul(q, geo.so3_exp(0.5 * dtheta)))
    E_half = geo.quat_to_rotmat(geo.so3_exp(0.5 * dtheta)).swapaxes(-1, -2)
    E_full = geo.quat_to_rotmat(geo.so3_exp(dtheta)).swapaxes(-1, -2)
    A = -R_half @ geo.skew(acc_b)
    Jr_half = geo.so3_right_jacobian(0.5 * dtheta)
    Jr_full = geo.so3_right_jacobian(dtheta)

    shape = dt.shape
    d = dt[..., None, None]
    F = np.zeros(shape + (9, 9))
    eye = np.eye(3)
    F[..., 0:3, 0:3] = eye
    F[..., 0:3, 3:6] = eye * d
    F[..., 0:3, 6:9] = 0.5 * d**2 * (A @ E_half)
    F[..., 3:6, 3:6] = eye
    F[..., 3:6, 6:9] = d * (A @ E_half)
    F[..., 6:9, 6:9] = E_full

    G = np.zeros(shape + (9, 6))
    G[..., 0:3, 0:3] = 0.5 * d * R_half
    G[..., 3:6, 0:3] = R_half
    G[..., 0:3, 3:6] = 0.5 * d * (A @ Jr_half) * 0.5 * d
    G[..., 3:6, 3:6] = (A @ Jr_half) * 0.5 * d
    G[..., 6:9, 3:6] = Jr_full
    return F, G


def step_covariance(cov, q, acc_b, w, dt, accel_noise_density: float, gyro_noise_density: float):
    """Propagate the 9x9 covariance through one midpoint step."""
    F, G = step_jacobians(q, acc_b, w, dt)
    dt = np.asarray(dt, dtype=float)
    qdiag = np.array([accel_noise_density**2] * 3 + [gyro_noise_density**2] * 3)
    GQG = (G * qdiag) @ G.swapaxes(-1, -2) * dt[..., None, None]
    out = F @ cov @ F.swapaxes(-1, -2) + GQG
    return 0.5 * (out + out.swapaxes(-1, -2))


def integrate_steps(
    t: np.ndarray,
    accel: np.ndarray,
    gyro: np.ndarray,
    bias_a: np.ndarray,
    bias_g: np.ndarray,
    noise: ImuNoiseParams | None = None,
) -> Preintegration:
    """Preintegrate batched sample grids.

    ``t`` has shape (M, L) and ``accel``/``gyro`` (M, L, 3): row m holds the
    samples of interval m including its end points. Repeated trailing
    timestamps (zero-length steps) act as padding.
    """
    t = np.asarray(t, dtype=float)
    accel = np.asarray(accel, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    M, L = t.shape
    bias_a = np.broadcast_to(np.asarray(bias_a, dtype=float), (M, 3)).copy()
    bias_g = np.broadcast_to(np.asarray(bias_g, dtype=float), (M, 3)).copy()

    alpha = np.zeros((M, 3))
    beta = np.zeros((M, 3))
    q = np.tile(geo.IDENTITY_QUAT, (M, 1))
    cov = np.zeros((M, 9, 9))
    jac = np.zeros((M, 9, 6))
    if noise is not None:
        qdiag = np.array([noise.accel_noise_density**2] * 3 + [noise.gyro_noise_density**2] * 3)

    for l in range(L - 1):
        dt = t[:, l + 1] - t[:, l]
        w = 0.5 * (gyro[:, l] + gyro[:, l + 1]) - bias_g
        acc_b = 0.5 * (accel[:, l] + accel[:, l + 1]) - bias_a
        dtheta = w * dt[:, None]
        q_half = geo.quat_mul(q, geo.so3_exp(0.5 * dtheta))
        acc = geo.quat_rotate(q_half, acc_b)

        F, G = step_jacobians(q, acc_b, w, dt)
        d = dt[:, None, None]
        jac = F @ jac - G * d
        if noise is not None:
            cov = F @ cov @ F.swapaxes(-1, -2) + (G * qdiag) @ G.swapaxes(-1, -2) * d
            cov = 0.5 * (cov + cov.swapaxes(-1, -2))

        alpha = alpha + beta * dt[:, None] + 0.5 * acc * dt[:, None] ** 2
        beta = beta + acc * dt[:, None]
        q = geo.quat_mul(q, geo.so3_exp(dtheta))

    return Preintegration(
        alpha=alpha,
        beta=beta,
        dq=q,
        dt=t[:, -1] - t[:, 0],
        covariance=cov,
        bias_jacobians=jac,
        lin_bias_a=bias_a,
        lin_bias_g=bias_g,
    )


def interval_grid(imu: ImuData, t_i: np.ndarray, t_j: np.ndarray):
    """Sample grids for intervals ``[t_i[m], t_j[m]]`` with interpolated ends."""
    t_i = np.atleast_1d(np.asarray(t_i, dtype=float))
    t_j = np.atleast_1d(np.asarray(t_j, dtype=float))
    if np.any(t_j < t_i):
        raise ValueError("interval end precedes start")
    period = 1.0 / imu.nominal_rate
    lo, hi = imu.t[0] - period, imu.t[-1] + period
    bad = (t_i < lo) | (t_j > hi)
    if np.any(bad):
        m = int(np.flatnonzero(bad)[0])
        raise InsufficientCoverage(
            f"IMU stream [{imu.t[0]:.6f}, {imu.t[-1]:.6f}] s does not cover interval "
            f"[{t_i[m]:.6f}, {t_j[m]:.6f}] s"
        )
    first = np.searchsorted(imu.t, t_i, side="right")
    stop = np.searchsorted(imu.t, t_j, side="left")
    n_inner = np.maximum(stop - first, 0)
    L = int(n_inner.max()) + 2 if len(n_inner) else 2

    cols = np.arange(L)[None, :]
    inner_idx = np.clip(first[:, None] + cols - 1, 0, len(imu.t) - 1)
    is_start = cols == 0
    is_inner = (cols >= 1) & (cols <= n_inner[:, None])

    a_i, g_i = imu.interpolate(t_i)
    a_j, g_j = imu.interpolate(t_j)
    t = np.where(is_start, t_i[:, None], np.where(is_inner, imu.t[inner_idx], t_j[:, None]))
    sel_s = is_start[..., None]
    sel_i = is_inner[..., None]
    acc = np.where(sel_s, a_i[:, None], np.where(sel_i, imu.accel[inner_idx], a_j[:, None]))
    gyr = np.where(sel_s, g_i[:, None], np.where(sel_i, imu.gyro[inner_idx], g_j[:, None]))
    return t, acc, gyr


def preintegrate_many(imu: ImuData, t_i, t_j, bias_a, bias_g, noise: ImuNoiseParams | None = None) -> Preintegration:
    """Batched :func:`preintegrate` over intervals ``[t_i[m], t_j[m]]``."""
    t, acc, gyr = interval_grid(imu, t_i, t_j)
    return integrate_steps(t, acc, gyr, bias_a, bias_g, noise)


def preintegrate(imu: ImuData, t_i: float, t_j: float, bias_a, bias_g, noise: ImuNoiseParams | None = None) -> Preintegration:
    """Preintegrate IMU samples over ``[t_i, t_j]`` at the given bias."""
    return preintegrate_many(imu, [t_i], [t_j], np.asarray(bias_a)[None], np.asarray(bias_g)[None], noise)[0]


def corrected_terms(p: Preintegration, bias_a, bias_g):
    """First-order bias-corrected ``(alpha, beta, dq)``; broadcasts over batches."""
    dba = np.asarray(bias_a, dtype=float) - p.lin_bias_a
    dbg = np.asarray(bias_g, dtype=float) - p.lin_bias_g
    J = p.bias_jacobians
    mv = lambda M, v: np.einsum("...ij,...j->...i", M, v)  # noqa: E731
    alpha = p.alpha + mv(J[..., 0:3, 0:3], dba) + mv(J[..., 0:3, 3:6], dbg)
    beta = p.beta + mv(J[..., 3:6, 0:3], dba) + mv(J[..., 3:6, 3:6], dbg)
    dq = geo.quat_mul(p.dq, geo.so3_exp(mv(J[..., 6:9, 3:6], dbg)))
    return alpha, beta, dq


def bias_delta_ok(p: Preintegration, bias_a, bias_g) -> np.ndarray:
    dba = np.linalg.norm(np.asarray(bias_a) - p.lin_bias_a, axis=-1)
    dbg = np.linalg.norm(np.asarray(bias_g) - p.lin_bias_g, axis=-1)
    return (dba <= MAX_BIAS_DELTA_ACCEL) & (dbg <= MAX_BIAS_DELTA_GYRO)


def correct_for_bias(p: Preintegration, new_bias_a, new_bias_g) -> Preintegration:
    """Shift a preintegration to a new bias estimate to first order."""
    new_bias_a = np.asarray(new_bias_a, dtype=float)
    new_bias_g = np.asarray(new_bias_g, dtype=float)
    if np.array_equal(new_bias_a, p.lin_bias_a) and np.array_equal(new_bias_g, p.lin_bias_g):
        return p
    if not np.all(bias_delta_ok(p, new_bias_a, new_bias_g)):
        raise BiasDeltaTooLarge(
            f"bias change exceeds first-order limits ({MAX_BIAS_DELTA_ACCEL} m/s^2, {MAX_BIAS_DELTA_GYRO} rad/s)"
        )
    alpha, beta, dq = corrected_terms(p, new_bias_a, new_bias_g)
    return replace(p, alpha=alpha, beta=beta, dq=dq, lin_bias_a=new_bias_a, lin_bias_g=new_bias_g)
