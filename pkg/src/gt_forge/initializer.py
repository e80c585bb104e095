"""Prior-free coarse initialization of extrinsics, time offset, gravity and velocities.

Pipeline: correlate angular-speed signals to find a constant clock offset,
build constraint pairs at a fixed stride, recover ``q_MI`` from the
hand-eye equation with screw-consistency weights inside RANSAC, then solve
velocities, gravity and ``p_MI`` by weighted linear least squares.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import geometry as geo
from .errors import ConsensusFailure, DegenerateAxes, IllConditioned, NoMotion, OffsetAtSearchBoundary
from .preintegration import GRAVITY, ImuData, Preintegration, preintegrate_many
from .spline import MocapData

MIN_PAIR_ANGLE = 1e-3  # rad; pairs below this carry no axis information
MIN_SCREW_TRANSLATION = 5e-3  # m; translation kernel applied above this along-axis magnitude
MAX_CONDITION = 1e10
MIN_INLIER_RATIO = 0.3


@dataclass(frozen=True)
class InitConfig:
    mu: float = 5.0
    pair_stride: float = 0.2  # s
    ransac_iters: int = 200
    ransac_rotation_inlier_tol: float = 0.05  # rad
    ransac_translation_inlier_tol: float = 0.03  # m
    correlation_rate: float = 100.0  # Hz
    max_offset_search: float = 10.0  # s
    linear_iters: int = 3
    seed: int = 0
    time_offset: float | None = None  # skip correlation when the offset is known

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        for name in ("pair_stride", "ransac_rotation_inlier_tol", "ransac_translation_inlier_tol",
                     "correlation_rate", "max_offset_search"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be at least 1")


@dataclass(frozen=True)
class InitResult:
    q_MI: np.ndarray
    p_MI: np.ndarray
    t_MI0: float
    g_W: np.ndarray
    epoch_t: np.ndarray  # IMU clock
    velocities: np.ndarray  # (E, 3), NaN where an epoch has no inlier constraint
    inlier_mask: np.ndarray  # per constraint pair
    low_confidence: bool = False

    @property
    def rollpitch(self) -> tuple[float, float]:
        return gravity_to_rollpitch(self.g_W)


# ---------------------------------------------------------------- time alignment


def _resample(t, x, t0, fs, n):
    return np.interp(t0 + np.arange(n) / fs, t, x)


def coarse_time_align(imu: ImuData, mocap: MocapData, cfg: InitConfig = InitConfig()) -> float:
    """Constant offset ``t_MI0`` (``tau = t + t_MI0``) from angular-speed cross-correlation."""
    fs = cfg.correlation_rate
    s_imu = np.linalg.norm(imu.gyro, axis=1)
    rel = geo.quat_mul(geo.quat_conj(mocap.q[:-1]), mocap.q[1:])
    s_moc = geo.rotation_angle(rel) / np.diff(mocap.tau)
    t_moc = 0.5 * (mocap.tau[:-1] + mocap.tau[1:])

    nx = int(np.floor((imu.t[-1] - imu.t[0]) * fs)) + 1
    ny = int(np.floor((t_moc[-1] - t_moc[0]) * fs)) + 1
    # corrupt MoCap samples show up as speeds far beyond anything the gyro saw
    good = s_moc <= 1.5 * s_imu.max() + 0.5
    if np.count_nonzero(good) < 2:
        raise NoMotion("no plausible MoCap angular-speed samples")
    x = _resample(imu.t, s_imu, imu.t[0], fs, nx)
    y = _resample(t_moc[good], s_moc[good], t_moc[0], fs, ny)
    # symmetric median filter: suppresses residual spikes without shifting either signal
    x = signal.medfilt(x, 7)
    y = signal.medfilt(y, 7)
    x = x - x.mean()
    y = y - y.mean()
    if np.sqrt(np.mean(x * x)) < 1e-6 or np.sqrt(np.mean(y * y)) < 1e-6:
        raise NoMotion("angular-speed signal is flat; no rotation to correlate")

    z = signal.correlate(x, y, mode="full", method="fft")
    lags = signal.correlation_lags(nx, ny, mode="full")
    ex = signal.correlate(x * x, np.ones(ny), mode="full", method="fft")
    ey = signal.correlate(np.ones(nx), y * y, mode="full", method="fft")
    overlap = signal.correlate(np.ones(nx), np.ones(ny), mode="full", method="fft")
    ncc = z / np.sqrt(np.maximum(ex * ey, 1e-300))

    # z[lag] pairs y[n] (tau) with x[n + lag] (t): offset = tau - t
    base = t_moc[0] - imu.t[0]
    offsets = base - lags / fs
    allowed = (np.abs(offsets) <= cfg.max_offset_search) & (overlap >= 0.5 * min(nx, ny))
    idx = np.flatnonzero(allowed)
    if len(idx) < 3:
        raise OffsetAtSearchBoundary("streams do not overlap within the offset search range")
    k = idx[np.argmax(ncc[idx])]
    peak = float(ncc[k])
    if peak < 0.5:
        raise NoMotion(f"peak angular-speed correlation {peak:.3f} below 0.5")
    if k == idx[0] or k == idx[-1]:
        raise OffsetAtSearchBoundary(f"correlation peak at offset {offsets[k]:.3f} s lies on the search boundary")
    c_m, c_0, c_p = ncc[k - 1], ncc[k], ncc[k + 1]
    den = c_m - 2.0 * c_0 + c_p
    frac = 0.5 * (c_m - c_p) / den if den < 0 else 0.0
    return float(base - (lags[k] + frac) / fs)


# ---------------------------------------------------------------- rotation


def kernel_weight(theta_M, theta_I, mu: float = 5.0):
    """Screw-consistency weight ``exp(mu (1 - max/min))`` in (0, 1]."""
    a = np.asarray(theta_M, dtype=float)
    b = np.asarray(theta_I, dtype=float)
    return np.exp(mu * (1.0 - np.maximum(a, b) / np.minimum(a, b)))


@dataclass(frozen=True)
class ConstraintPairs:
    """Relative-motion constraints between consecutive epochs ``(m, m + 1)``."""

    t_i: np.ndarray  # IMU clock
    t_j: np.ndarray
    q_WMi: np.ndarray
    p_WMi: np.ndarray
    q_WMj: np.ndarray
    p_WMj: np.ndarray
    q_M: np.ndarray  # q_WMi^-1 q_WMj, canonical
    q_I: np.ndarray  # preintegrated rotation, canonical
    theta_M: np.ndarray
    theta_I: np.ndarray
    preint: Preintegration

    def __len__(self) -> int:
        return len(self.t_i)

    @property
    def epoch_t(self) -> np.ndarray:
        return np.append(self.t_i, self.t_j[-1:])


def build_pairs(imu: ImuData, mocap: MocapData, t_MI0: float, stride: float) -> ConstraintPairs:
    """Pairs of raw MoCap samples ``stride`` apart with matching IMU preintegrations."""
    step = max(1, int(round(stride * mocap.nominal_rate)))
    t = mocap.tau - t_MI0
    ok = np.flatnonzero((t >= imu.t[0]) & (t <= imu.t[-1]))
    if len(ok) < 2 * step + 1:
        raise DegenerateAxes("too little IMU/MoCap overlap to form constraint pairs")
    ks = np.arange(ok[0], ok[-1] + 1, step)
    ki, kj = ks[:-1], ks[1:]
    pre = preintegrate_many(imu, t[ki], t[kj], np.zeros(3), np.zeros(3))
    q_M = geo.quat_canonical(geo.quat_mul(geo.quat_conj(mocap.q[ki]), mocap.q[kj]))
    q_I = geo.quat_canonical(pre.dq)
    return ConstraintPairs(
        t_i=t[ki], t_j=t[kj],
        q_WMi=mocap.q[ki], p_WMi=mocap.p[ki], q_WMj=mocap.q[kj], p_WMj=mocap.p[kj],
        q_M=q_M, q_I=q_I,
        theta_M=geo.rotation_angle(q_M), theta_I=geo.rotation_angle(q_I),
        preint=pre,
    )


def check_rotation_excitation(q_I: np.ndarray) -> None:
    """Raise :class:`DegenerateAxes` unless rotations span at least two axes."""
    phi = geo.so3_log(q_I, check=False)
    ang = np.linalg.norm(phi, axis=1)
    big = ang >= MIN_PAIR_ANGLE
    if np.count_nonzero(big) < 2:
        raise DegenerateAxes("fewer than two constraint pairs rotate by more than 1e-3 rad")
    axes = phi[big] / ang[big, None]
    s = np.linalg.svd(axes, compute_uv=False)
    if s[1] < 1e-2 * s[0]:
        raise DegenerateAxes("all rotations share a single axis")


def solve_extrinsic_rotation(q_M, q_I, theta_M, theta_I, cfg: InitConfig = InitConfig(), weights=None) -> np.ndarray:
    """Weighted hand-eye rotation ``q_M ⊗ q_MI = q_MI ⊗ q_I`` by SVD."""
    q_M = geo.quat_canonical(np.asarray(q_M, dtype=float))
    q_I = geo.quat_canonical(np.asarray(q_I, dtype=float))
    theta_M = np.asarray(theta_M, dtype=float)
    theta_I = np.asarray(theta_I, dtype=float)
    use = (theta_M >= MIN_PAIR_ANGLE) & (theta_I >= MIN_PAIR_ANGLE)
    if np.count_nonzero(use) < 2:
        raise DegenerateAxes("need at least two pairs with non-trivial rotation")
    K = kernel_weight(theta_M[use], theta_I[use], cfg.mu)
    if weights is not None:
        K = K * np.asarray(weights, dtype=float)[use]
    Q = geo.quat_left_matrix(q_M[use]) - geo.quat_right_matrix(q_I[use])
    A = (K[:, None, None] * Q).reshape(-1, 4)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    # exact single-axis data leaves a two-dimensional null space, both singular values at round-off
    if s[2] < 10.0 * s[3] or s[2] < 1e-8 * s[0]:
        raise DegenerateAxes(f"rotation axes are not diverse (sigma3={s[2]:.3e}, sigma4={s[3]:.3e})")
    return geo.quat_canonical(geo.quat_normalize(vt[3]))


def rotation_residuals(q_M, q_I, q_MI) -> np.ndarray:
    """Angle between ``q_M ⊗ q_MI`` and ``q_MI ⊗ q_I`` per pair."""
    lhs = geo.quat_mul(q_M, q_MI)
    rhs = geo.quat_mul(q_MI, q_I)
    return geo.rotation_angle(geo.quat_mul(geo.quat_conj(rhs), lhs))


# ---------------------------------------------------------------- linear init


def _screw_translation(pairs: ConstraintPairs, q_MI, v_i, g):
    """Translation along the rotation axis seen by MoCap and by the IMU."""
    t_M = geo.quat_rotate(geo.quat_conj(pairs.q_WMi), pairs.p_WMj - pairs.p_WMi)
    q_WIi = geo.quat_mul(pairs.q_WMi, q_MI)
    dt = pairs.preint.dt[:, None]
    t_I = geo.quat_rotate(geo.quat_conj(q_WIi), v_i * dt - 0.5 * g * dt**2) + pairs.preint.alpha

    def axis(q):
        v = q[:, 1:]
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return np.where(n > 0, v / np.where(n > 0, n, 1.0), 0.0)

    d_M = np.sum(axis(pairs.q_M) * t_M, axis=1)
    d_I = np.sum(axis(pairs.q_I) * t_I, axis=1)
    return d_M, d_I


def _linear_system(pairs: ConstraintPairs, q_MI, rows: np.ndarray, w: np.ndarray, with_p: bool):
    """Assemble the stacked linear system over pairs ``rows``; epochs chained."""
    n = len(pairs)
    used = np.zeros(n + 1, dtype=bool)
    used[rows] = True
    used[rows + 1] = True
    col = -np.ones(n + 1, dtype=int)
    col[used] = np.arange(np.count_nonzero(used))
    nv = 3 * int(used.sum())
    ncols = nv + (6 if with_p else 3)

    m = len(rows)
    dt = pairs.preint.dt[rows]
    R_i = geo.quat_to_rotmat(pairs.q_WMi[rows])
    R_j = geo.quat_to_rotmat(pairs.q_WMj[rows])
    R_MI = geo.quat_to_rotmat(q_MI)
    A = np.zeros((m, 6, ncols))
    eye = np.eye(3)
    ci = 3 * col[rows]
    cj = 3 * col[rows + 1]
    r3 = np.arange(3)
    mi = np.arange(m)[:, None]
    A[mi, r3, ci[:, None] + r3] = -dt[:, None]
    A[mi, 3 + r3, ci[:, None] + r3] = -1.0
    A[mi, 3 + r3, cj[:, None] + r3] = 1.0
    A[:, 0:3, nv:nv + 3] = 0.5 * dt[:, None, None] ** 2 * eye
    A[:, 3:6, nv:nv + 3] = dt[:, None, None] * eye
    if with_p:
        A[:, 0:3, nv + 3:nv + 6] = R_j - R_i
    RR = R_i @ R_MI
    b = np.zeros((m, 6))
    b[:, 0:3] = np.einsum("nij,nj->ni", RR, pairs.preint.alpha[rows]) + pairs.p_WMi[rows] - pairs.p_WMj[rows]
    b[:, 3:6] = np.einsum("nij,nj->ni", RR, pairs.preint.beta[rows])
    sw = np.sqrt(w)[:, None]
    return (A * sw[..., None]).reshape(-1, ncols), (b * sw).reshape(-1), col


def solve_linear_init(pairs: ConstraintPairs, q_MI, cfg: InitConfig = InitConfig(), mask=None):
    """Velocities per epoch, ``g_W`` and ``p_MI`` from the stacked linear system.

    Iteratively reweighted by the translational screw kernel: the translation
    along the rotation axis must agree between MoCap and the IMU estimate.
    Returns ``(velocities (E, 3), g_W, p_MI)``; epochs without an active
    pair get NaN velocity.
    """
    n = len(pairs)
    if n < 1:
        raise IllConditioned("no constraint pairs")
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if len(rows) < 3:
        raise IllConditioned(f"only {len(rows)} constraint pairs, need at least 3")
    q_MI = geo.quat_normalize(np.asarray(q_MI, dtype=float))

    rot_span = np.max(np.abs(geo.quat_to_rotmat(pairs.q_WMj[rows]) - geo.quat_to_rotmat(pairs.q_WMi[rows])))
    with_p = rot_span > 1e-9
    if not with_p:
        warnings.warn("no rotation in the constraint set: p_MI is unobservable and set to zero")

    w = np.ones(len(rows))
    for it in range(max(1, cfg.linear_iters)):
        A, b, col = _linear_system(pairs, q_MI, rows, w, with_p)
        N = A.T @ A
        d = np.sqrt(np.maximum(np.diag(N), 1e-300))
        Ns = N / d[:, None] / d[None, :]
        cond = np.linalg.cond(Ns)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise IllConditioned(f"normal matrix condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}")
        x = np.linalg.solve(Ns, (A.T @ b) / d) / d

        nv = len(x) - (6 if with_p else 3)
        vel = x[:nv].reshape(-1, 3)
        g = x[nv:nv + 3]
        p_MI = x[nv + 3:nv + 6] if with_p else np.zeros(3)
        if it == cfg.linear_iters - 1:
            break
        d_M, d_I = _screw_translation(pairs, q_MI, _epoch_vel(vel, col)[:-1], g)
        d_M, d_I = d_M[rows], d_I[rows]
        small = np.minimum(np.abs(d_M), np.abs(d_I))
        same_sign = np.sign(d_M) == np.sign(d_I)
        w = np.where((small > MIN_SCREW_TRANSLATION) & same_sign,
                     kernel_weight(np.abs(d_M), np.abs(d_I), cfg.mu), 1.0)
    return _epoch_vel(vel, col), g, p_MI


def _epoch_vel(vel: np.ndarray, col: np.ndarray) -> np.ndarray:
    out = np.full((len(col), 3), np.nan)
    out[col >= 0] = vel[col[col >= 0]]
    return out


def gravity_to_rollpitch(g_W) -> tuple[float, float]:
    """``(roll, pitch)`` with ``Rx(roll) Ry(pitch) (0, 0, 9.81)`` along ``g_W``."""
    d = np.asarray(g_W, dtype=float)
    d = d / np.linalg.norm(d)
    pitch = float(np.arcsin(np.clip(d[0], -1.0, 1.0)))
    roll = float(np.arctan2(-d[1], d[2]))
    return roll, pitch


# ---------------------------------------------------------------- RANSAC


def _inliers(pairs: ConstraintPairs, q_MI, tol: float) -> np.ndarray:
    res = rotation_residuals(pairs.q_M, pairs.q_I, q_MI)
    return (res <= tol) & (np.abs(pairs.theta_M - pairs.theta_I) <= tol)


def ransac_rotation(pairs: ConstraintPairs, cfg: InitConfig = InitConfig()):
    """Best-consensus extrinsic rotation and the rotation inlier mask."""
    usable = np.flatnonzero((pairs.theta_M >= MIN_PAIR_ANGLE) & (pairs.theta_I >= MIN_PAIR_ANGLE))
    if len(usable) < 3:
        raise DegenerateAxes("fewer than three constraint pairs with non-trivial rotation")
    rng = np.random.default_rng(cfg.seed)
    best = None
    best_count = -1
    for _ in range(cfg.ransac_iters):
        pick = rng.choice(usable, size=3, replace=False)
        try:
            q = solve_extrinsic_rotation(pairs.q_M[pick], pairs.q_I[pick], pairs.theta_M[pick], pairs.theta_I[pick], cfg)
        except DegenerateAxes:
            continue
        inl = _inliers(pairs, q, cfg.ransac_rotation_inlier_tol)
        count = int(np.count_nonzero(inl))
        if count > best_count:
            best, best_count = inl, count
        if count == len(pairs):
            break
    if best is None:
        raise DegenerateAxes("no RANSAC sample spanned two rotation axes")
    if best_count < MIN_INLIER_RATIO * len(pairs):
        raise ConsensusFailure(f"best rotation consensus {best_count}/{len(pairs)} below {MIN_INLIER_RATIO:.0%}")
    mask = best
    for _ in range(3):
        q = solve_extrinsic_rotation(pairs.q_M[mask], pairs.q_I[mask], pairs.theta_M[mask], pairs.theta_I[mask], cfg)
        new = _inliers(pairs, q, cfg.ransac_rotation_inlier_tol)
        if np.array_equal(new, mask):
            break
        mask = new
    if np.count_nonzero(mask) < MIN_INLIER_RATIO * len(pairs):
        raise ConsensusFailure(f"rotation consensus {np.count_nonzero(mask)}/{len(pairs)} below {MIN_INLIER_RATIO:.0%}")
    return q, mask


def ransac_initialize(imu: ImuData, mocap: MocapData, cfg: InitConfig = InitConfig()) -> InitResult:
    """Full coarse initialization; see module docstring."""
    # axis diversity of the IMU motion alone, independent of the clock offset
    edges = np.arange(imu.t[0], imu.t[-1], cfg.pair_stride)
    if len(edges) < 3:
        raise DegenerateAxes("IMU stream shorter than two constraint pairs")
    probe = preintegrate_many(imu, edges[:-1], edges[1:], np.zeros(3), np.zeros(3))
    try:
        check_rotation_excitation(probe.dq)
    except DegenerateAxes as exc:
        raise type(exc)(f"IMU data over t = [{imu.t[0]:.3f}, {imu.t[-1]:.3f}] s: {exc}") from exc

    if cfg.time_offset is None:
        try:
            t_MI0 = coarse_time_align(imu, mocap, cfg)
        except NoMotion as exc:
            # the gyro shows rotation, so a flat or uncorrelated MoCap signal means corrupt MoCap data
            raise ConsensusFailure(f"MoCap rotation does not match the gyro: {exc}") from exc
    else:
        t_MI0 = float(cfg.time_offset)

    pairs = build_pairs(imu, mocap, t_MI0, cfg.pair_stride)
    q_MI, rot_mask = ransac_rotation(pairs, cfg)

    mask = rot_mask.copy()
    for _ in range(3):
        vel, g, p_MI = solve_linear_init(pairs, q_MI, cfg, mask)
        v_i = np.nan_to_num(vel[:-1])
        d_M, d_I = _screw_translation(pairs, q_MI, v_i, g)
        has_vel = ~np.isnan(vel[:-1, 0])
        new = rot_mask & (~has_vel | (np.abs(d_M - d_I) <= cfg.ransac_translation_inlier_tol))
        if np.array_equal(new, mask):
            break
        mask = new
        if np.count_nonzero(mask) < MIN_INLIER_RATIO * len(pairs):
            raise ConsensusFailure(f"translation consensus {np.count_nonzero(mask)}/{len(pairs)} below 30%")

    low = abs(np.linalg.norm(g) - GRAVITY) > 0.05 * GRAVITY
    if low:
        warnings.warn(f"initial gravity magnitude {np.linalg.norm(g):.3f} m/s^2 deviates more than 5% from 9.81")
    return InitResult(q_MI=q_MI, p_MI=p_MI, t_MI0=t_MI0, g_W=g, epoch_t=pairs.epoch_t, velocities=vel,
                      inlier_mask=mask, low_confidence=bool(low))
