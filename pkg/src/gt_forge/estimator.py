"""Batch maximum-likelihood estimation of the IMU trajectory and the calibration.

The cost sums whitened IMU preintegration residuals, bias random-walk
residuals and Huber-robustified MoCap residuals. It is minimized by
Levenberg-Marquardt; each step eliminates the shared parameters
(extrinsics, offset knots, gravity) by a Schur complement over the
block-tridiagonal inertial-state chain, which is factorized as a banded
Cholesky matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, ndimage

from . import geometry as geo
from .errors import EmptyOverlap, NotConverged, NumericalFailure
from .factors import (
    STATE_DIM,
    ExtrinsicState,
    GravityAlign,
    InertialState,
    bias_residuals,
    imu_residual,
    mocap_residual,
    mocap_tau,
)
from .initializer import InitConfig, InitResult, gravity_to_rollpitch, ransac_initialize
from .metrics import Trajectory
from .preintegration import ImuData, ImuNoiseParams, Preintegration, bias_delta_ok, preintegrate_many
from .spline import MocapData, SplineSet, build_spline_set

BAND = 2 * STATE_DIM - 1  # upper bandwidth of the state block
DENSE_BELOW = 200  # states; smaller problems use a dense Cholesky solve


@dataclass(frozen=True)
class EstimatorConfig:
    state_rate: float = 100.0  # Hz
    offset_knot_spacing: float = 30.0  # s
    constant_offset: bool = False  # single offset knot
    degeneracy_window: float = 5.0  # s
    degeneracy_angle: float = np.deg2rad(10.0)  # rad
    degeneracy_max_poses: int = 100
    mask_degenerate: bool = True
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    mocap_trans_noise_density: float = 4.3e-5  # m/sqrt(Hz)
    mocap_rot_noise_density: float = 1.7e-4  # rad/sqrt(Hz)
    huber_delta: float = 3.0  # in whitened units
    domain_margin: float = 0.05  # s kept inside the spline domain for active MoCap factors
    max_iterations: int = 50
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12  # cost decrease below this counts as converged (round-off floor)
    calib_tol: float = 1e-8  # outer-round stop: calibration change (m, rad, s)
    max_rounds: int = 40
    round_rel_tol: float = 1e-6  # inner tolerance for intermediate masking rounds
    grad_tol: float = 1e-10
    initial_lambda: float = 1e-4
    max_lambda: float = 1e10
    strict: bool = False  # raise NotConverged instead of flagging it

    def __post_init__(self):
        if not self.state_rate > 0 or not self.offset_knot_spacing > 0:
            raise ValueError("state_rate and offset_knot_spacing must be positive")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")


@dataclass(frozen=True)
class StateVector:
    states: InertialState
    extrinsics: ExtrinsicState
    gravity: GravityAlign

    @property
    def n_shared(self) -> int:
        return 6 + self.extrinsics.n_offsets + 2

    def retract(self, ds: np.ndarray, dp: np.ndarray) -> "StateVector":
        m = self.extrinsics.n_offsets
        return StateVector(
            self.states.retract(ds),
            self.extrinsics.retract(dp[: 6 + m]),
            self.gravity.retract(dp[6 + m:]),
        )


def truth_state_vector(sim, t, knot_times) -> StateVector:
    """Ground-truth :class:`StateVector` from a simulator output at IMU-clock epochs ``t``."""
    t = np.asarray(t, dtype=float)
    st, ba, bg = sim.state_at(t)
    tr = sim.truth
    knot_times = np.asarray(knot_times, dtype=float)
    ext = ExtrinsicState(tr.extrinsics.p.copy(), tr.extrinsics.q.copy(), knot_times, tr.offset(knot_times))
    roll, pitch = gravity_to_rollpitch(tr.gravity)
    return StateVector(InertialState(t, st.pose.p, st.vel, st.pose.q, ba, bg), ext, GravityAlign(roll, pitch))


# ---------------------------------------------------------------- degeneracy


def _max_pairwise_angle(q: np.ndarray) -> float:
    """Largest relative rotation angle between any two quaternions."""
    dot = np.abs(q @ q.T)
    c = np.clip(2.0 * dot * dot - 1.0, -1.0, 1.0)  # cos of the angle, trace identity
    return float(np.arccos(c.min()))


def detect_degenerate_windows(mocap: MocapData, w: float = 5.0, varpi: float = np.deg2rad(10.0),
                              max_poses: int = 100) -> list[tuple[float, float]]:
    """Consecutive windows ``[t_n, t_n + w)`` whose maximum rotation stays below ``varpi``.

    The pairwise maximum runs on at most ``max_poses`` evenly spaced poses;
    when the subsampled maximum could still be within the subsampling error
    of the threshold the window is re-checked over all its samples.
    """
    tau = mocap.tau
    if len(tau) == 0:
        return []
    out = []
    n_win = int(np.floor((tau[-1] - tau[0]) / w)) + 1
    starts = tau[0] + w * np.arange(n_win)
    bounds = np.searchsorted(tau, np.append(starts, starts[-1] + w), side="left")
    step_angles = np.append(geo.rotation_angle(geo.quat_mul(geo.quat_conj(mocap.q[:-1]), mocap.q[1:])), 0.0)
    for j in range(n_win):
        a, b = bounds[j], bounds[j + 1]
        if b - a < 2:
            out.append((float(starts[j]), float(starts[j] + w)))
            continue
        q = mocap.q[a:b]
        stride = int(np.ceil((b - a) / max_poses))
        theta = _max_pairwise_angle(q[::stride])
        if theta < varpi and stride > 1:
            # each extremal pose lies within stride - 1 steps of a subsampled one
            slack = 2.0 * (stride - 1) * step_angles[a:b - 1].max()
            if theta + slack >= varpi:
                theta = _max_pairwise_angle(q)
        if theta < varpi:
            out.append((float(starts[j]), float(starts[j] + w)))
    return out


def in_windows(tau, windows: list[tuple[float, float]]) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    flag = np.zeros(tau.shape, dtype=bool)
    for lo, hi in windows:
        flag |= (tau >= lo) & (tau < hi)
    return flag


# ---------------------------------------------------------------- problem


@dataclass
class FactorGraphProblem:
    x: StateVector
    imu: ImuData
    spline: SplineSet
    preint: Preintegration
    imu_whiten: np.ndarray  # (n-1, 9, 9), inverse Cholesky factor of the covariance
    mocap_sigma: np.ndarray  # (6,)
    mocap_active: np.ndarray  # (n,) bool
    mocap_degenerate: np.ndarray  # (n,) bool
    degenerate_windows: list
    cfg: EstimatorConfig
    # calibration seen by degenerate MoCap factors; None means the live estimate
    frozen: ExtrinsicState | None = None

    @property
    def n_states(self) -> int:
        return len(self.x.states)

    def with_states(self, x: StateVector) -> "FactorGraphProblem":
        return replace(self, x=x)


def _whitening(cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    return np.linalg.inv(L)


def offset_knot_times(t0: float, t1: float, spacing: float, constant: bool = False) -> np.ndarray:
    """Evenly spread offset knots roughly ``spacing`` apart, clamped to ``[t0, t1]``."""
    if constant:
        return np.array([0.5 * (t0 + t1)])
    m = max(2, int(round((t1 - t0) / spacing)) + 1)
    return np.linspace(t0, t1, m)


def _screen_outliers(mocap: MocapData, tol: float = 0.05) -> MocapData:
    """Drop samples far from the running median of their neighbours (initial states only)."""
    if len(mocap) < 7:
        return mocap
    med = ndimage.median_filter(mocap.p, size=(7, 1), mode="nearest")
    keep = np.linalg.norm(mocap.p - med, axis=1) <= tol
    return mocap.slice(keep) if keep.sum() >= 2 else mocap


def build_problem(imu: ImuData, mocap: MocapData, init: InitResult, cfg: EstimatorConfig = EstimatorConfig(),
                  states: StateVector | None = None) -> FactorGraphProblem:
    """Instantiate states, factors and the offset spline from an initialization.

    ``states`` overrides the propagated initial guess (e.g. ground truth);
    its epochs define the state times.
    """
    spline = build_spline_set(mocap)
    if states is None:
        t0 = max(imu.t[0], mocap.tau[0] - init.t_MI0)
        t1 = min(imu.t[-1], mocap.tau[-1] - init.t_MI0)
        n = int(np.floor((t1 - t0) * cfg.state_rate + 1e-9))
        if n < 2:
            raise EmptyOverlap(f"IMU [{imu.t[0]:.3f}, {imu.t[-1]:.3f}] s and MoCap shifted by {init.t_MI0:.3f} s "
                               "share less than two state periods")
        t = t0 + np.arange(n) / cfg.state_rate
        knots = offset_knot_times(t[0], t[-1], cfg.offset_knot_spacing, cfg.constant_offset)
        ext = ExtrinsicState(np.asarray(init.p_MI, dtype=float), geo.quat_normalize(init.q_MI), knots,
                             np.full(len(knots), float(init.t_MI0)))
        T_WM = _screen_outliers(mocap).interpolate(t + init.t_MI0)
        T_WI = T_WM @ geo.Pose(ext.q_MI, ext.p_MI)
        vel = np.gradient(T_WI.p, t, axis=0)
        zeros = np.zeros((n, 3))
        st = InertialState(t, T_WI.p, vel, T_WI.q, zeros, zeros.copy())
        roll, pitch = gravity_to_rollpitch(init.g_W)
        x = StateVector(st, ext, GravityAlign(roll, pitch))
    else:
        x = states
        t = x.states.t
        n = len(t)
        if n < 2:
            raise EmptyOverlap("need at least two states")

    nz = cfg.imu_noise
    preint = preintegrate_many(imu, t[:-1], t[1:], x.states.ba[:-1], x.states.bg[:-1], nz)
    rate = mocap.nominal_rate
    sigma = np.array([cfg.mocap_trans_noise_density * np.sqrt(rate)] * 3 + [cfg.mocap_rot_noise_density * np.sqrt(rate)] * 3)

    tau = mocap_tau(x.states, x.extrinsics)
    seg_lo = spline.segment_of(tau - cfg.domain_margin)
    seg_hi = spline.segment_of(tau + cfg.domain_margin)
    active = (seg_lo >= 0) & (seg_lo == seg_hi)
    interior = (tau >= mocap.tau[0] + 0.1) & (tau <= mocap.tau[-1] - 0.1)
    if np.any(~active & interior):
        warnings.warn(f"{int(np.count_nonzero(~active & interior))} MoCap factors fall into MoCap gaps and are dropped")

    windows = detect_degenerate_windows(mocap, cfg.degeneracy_window, cfg.degeneracy_angle, cfg.degeneracy_max_poses)
    degenerate = in_windows(tau, windows) if cfg.mask_degenerate else np.zeros(n, dtype=bool)
    return FactorGraphProblem(
        x=x, imu=imu, spline=spline, preint=preint, imu_whiten=_whitening(preint.covariance),
        mocap_sigma=sigma, mocap_active=active, mocap_degenerate=degenerate, degenerate_windows=windows, cfg=cfg,
    )


# ---------------------------------------------------------------- evaluation


def _huber(r: np.ndarray, delta: float):
    """Per-component Huber cost and IRLS weight."""
    a = np.abs(r)
    rho = np.where(a <= delta, r * r, 2.0 * delta * a - delta * delta)
    w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
    return rho, w


@dataclass(frozen=True)
class Evaluation:
    cost: float
    r_imu: np.ndarray  # whitened (n-1, 9)
    r_bias: np.ndarray  # whitened (n-1, 6)
    r_mocap: np.ndarray  # whitened (k, 6) over active factors


def _mocap_terms(problem: FactorGraphProblem, x: StateVector, idx: np.ndarray, jacobians: bool = False):
    """MoCap residuals at states ``idx``; degenerate factors use the frozen calibration if set."""
    s = x.states
    deg = problem.mocap_degenerate[idx]
    if problem.frozen is None or not deg.any():
        return mocap_residual(s[idx], x.extrinsics, problem.spline, jacobians=jacobians)
    parts = [(np.flatnonzero(~deg), x.extrinsics), (np.flatnonzero(deg), problem.frozen)]
    outs = [(k, mocap_residual(s[idx[k]], e, problem.spline, jacobians=jacobians)) for k, e in parts if len(k)]
    if not jacobians:
        r = np.zeros((len(idx), 6))
        for k, rk in outs:
            r[k] = rk
        return r
    r = np.zeros((len(idx), 6))
    Js = np.zeros((len(idx), 6, STATE_DIM))
    Je = np.zeros((len(idx), 6, 6))
    Jo = np.zeros((len(idx), 6, 2))
    r_idx = np.zeros(len(idx), dtype=int)
    for k, (rk, (a, b, c, d)) in outs:
        r[k], Js[k], Je[k], Jo[k], r_idx[k] = rk, a, b, c, d
    return r, (Js, Je, Jo, r_idx)


def _in_domain(problem: FactorGraphProblem, x: StateVector, idx: np.ndarray) -> bool:
    s = x.states[idx]
    tau = mocap_tau(s, x.extrinsics)
    if problem.frozen is not None:
        deg = problem.mocap_degenerate[idx]
        tau = np.where(deg, mocap_tau(s, problem.frozen), tau)
    return bool(np.all(problem.spline.in_domain(tau)))


def evaluate_cost(problem: FactorGraphProblem, x: StateVector | None = None) -> Evaluation:
    """Total robust cost; ``inf`` if an active MoCap factor leaves the spline domain."""
    x = problem.x if x is None else x
    s = x.states
    s0, s1 = s[:-1], s[1:]
    nz = problem.cfg.imu_noise
    r_imu = np.einsum("nij,nj->ni", problem.imu_whiten, imu_residual(s0, s1, x.gravity, problem.preint))
    r_bias = bias_residuals(s0, s1, problem.preint.dt, nz.accel_random_walk, nz.gyro_random_walk)
    idx = np.flatnonzero(problem.mocap_active)
    if len(idx) and not _in_domain(problem, x, idx):
        return Evaluation(np.inf, r_imu, r_bias, np.zeros((0, 6)))
    r_m = _mocap_terms(problem, x, idx) / problem.mocap_sigma if len(idx) else np.zeros((0, 6))
    rho, _ = _huber(r_m, problem.cfg.huber_delta)
    cost = float(np.sum(r_imu**2) + np.sum(r_bias**2) + np.sum(rho))
    return Evaluation(cost, r_imu, r_bias, r_m)


def mocap_jacobian_blocks(problem: FactorGraphProblem, x: StateVector):
    """Whitened, IRLS-weighted MoCap rows: ``(idx, r, J_state, J_shared)``.

    ``idx`` lists the states with an active MoCap factor; ``J_shared`` spans
    ``[p_MI, theta_MI, offsets..., roll, pitch]`` and is zero for the
    calibration columns of factors inside degenerate windows.
    """
    n_p = x.n_shared
    m = x.extrinsics.n_offsets
    idx = np.flatnonzero(problem.mocap_active)
    if len(idx) == 0:
        return idx, np.zeros((0, 6)), np.zeros((0, 6, STATE_DIM)), np.zeros((0, 6, n_p))
    rm, (Js, Je, Jo, r_idx) = _mocap_terms(problem, x, idx, jacobians=True)
    inv_sig = 1.0 / problem.mocap_sigma
    rm = rm * inv_sig
    _, w = _huber(rm, problem.cfg.huber_delta)
    sw = np.sqrt(w) * inv_sig  # row scaling of the Jacobian
    rm = rm * np.sqrt(w)
    C = Js * sw[..., None]
    D = np.zeros((len(idx), 6, n_p))
    D[:, :, 0:6] = Je * sw[..., None]
    rows = np.arange(len(idx))
    D[rows, :, 6 + r_idx] += Jo[..., 0] * sw
    if m > 1:
        D[rows, :, 6 + r_idx + 1] += Jo[..., 1] * sw
    D[problem.mocap_degenerate[idx]] = 0.0
    return idx, rm, C, D


def _normal_equations(problem: FactorGraphProblem, x: StateVector):
    """Gauss-Newton blocks: diagonal/off-diagonal state blocks, state-shared, shared-shared, gradients."""
    cfg = problem.cfg
    s = x.states
    n = len(s)
    m = x.extrinsics.n_offsets
    n_p = x.n_shared
    g_col = 6 + m  # gravity columns
    s0, s1 = s[:-1], s[1:]

    r, (J0, J1, Jg) = imu_residual(s0, s1, x.gravity, problem.preint, jacobians=True)
    W = problem.imu_whiten
    r = np.einsum("nij,nj->ni", W, r)
    J0, J1, Jg = W @ J0, W @ J1, W @ Jg
    rb, (B0, B1) = bias_residuals(s0, s1, problem.preint.dt, cfg.imu_noise.accel_random_walk,
                                  cfg.imu_noise.gyro_random_walk, jacobians=True)
    A = np.concatenate([J0, B0], axis=1)  # (n-1, 15, 15)
    B = np.concatenate([J1, B1], axis=1)
    G = np.concatenate([Jg, np.zeros((n - 1, 6, 2))], axis=1)
    rr = np.concatenate([r, rb], axis=1)
    At, Bt = np.swapaxes(A, 1, 2), np.swapaxes(B, 1, 2)

    Hd = np.zeros((n, STATE_DIM, STATE_DIM))
    Hd[:-1] += At @ A
    Hd[1:] += Bt @ B
    Ho = At @ B
    Hsp = np.zeros((n, STATE_DIM, n_p))
    Hsp[:-1, :, g_col:] += At @ G
    Hsp[1:, :, g_col:] += Bt @ G
    Hpp = np.zeros((n_p, n_p))
    Hpp[g_col:, g_col:] = np.einsum("nki,nkj->ij", G, G)
    gs = np.zeros((n, STATE_DIM))
    gs[:-1] += np.einsum("nki,nk->ni", A, rr)
    gs[1:] += np.einsum("nki,nk->ni", B, rr)
    gp = np.zeros(n_p)
    gp[g_col:] = np.einsum("nki,nk->i", G, rr)

    idx, rm, C, D = mocap_jacobian_blocks(problem, x)
    if len(idx):
        Ct = np.swapaxes(C, 1, 2)
        Hd[idx] += Ct @ C
        Hsp[idx] += Ct @ D
        Hpp += np.einsum("nki,nkj->ij", D, D)
        gs[idx] += np.einsum("nki,nk->ni", C, rm)
        gp += np.einsum("nki,nk->i", D, rm)
    return Hd, Ho, Hsp, Hpp, gs, gp


_UPPER = np.triu_indices(STATE_DIM)
_FULL = np.indices((STATE_DIM, STATE_DIM)).reshape(2, -1)


def _banded(Hd: np.ndarray, Ho: np.ndarray) -> np.ndarray:
    """Upper banded storage (scipy convention) of the block-tridiagonal state matrix."""
    n = len(Hd)
    N = n * STATE_DIM
    ab = np.zeros((BAND + 1, N))
    base = STATE_DIM * np.arange(n)[:, None]
    a, b = _UPPER
    ab[BAND + a - b, base + b] = Hd[:, a, b]
    a, b = _FULL
    ab[BAND + a - b - STATE_DIM, base[:-1] + STATE_DIM + b] = Ho[:, a, b]
    return ab


def dense_normal_matrix(Hd, Ho, Hsp, Hpp) -> np.ndarray:
    """Assemble the full symmetric normal matrix (states first, shared parameters last)."""
    n = len(Hd)
    N = n * STATE_DIM
    H = np.zeros((N + len(Hpp), N + len(Hpp)))
    for k in range(n):
        sl = slice(k * STATE_DIM, (k + 1) * STATE_DIM)
        H[sl, sl] = Hd[k]
        if k + 1 < n:
            nx = slice((k + 1) * STATE_DIM, (k + 2) * STATE_DIM)
            H[sl, nx] = Ho[k]
            H[nx, sl] = Ho[k].T
    H[:N, N:] = Hsp.reshape(N, -1)
    H[N:, :N] = H[:N, N:].T
    H[N:, N:] = Hpp
    return H


def _solve_dense(Hd, Ho, Hsp, Hpp, gs, gp):
    n = len(Hd)
    H = dense_normal_matrix(Hd, Ho, Hsp, Hpp)
    try:
        c = linalg.cho_factor(H, check_finite=False)
    except linalg.LinAlgError:
        return None
    d = -linalg.cho_solve(c, np.concatenate([gs.reshape(-1), gp]), check_finite=False)
    if not np.all(np.isfinite(d)):
        raise NumericalFailure("non-finite LM step")
    return d[: n * STATE_DIM].reshape(n, STATE_DIM), d[n * STATE_DIM:]


def _solve_step(Hd, Ho, Hsp, Hpp, gs, gp, lam: float, dense_below: int = DENSE_BELOW):
    """Damped Gauss-Newton step; None if the damped system is not positive definite.

    Small problems are solved densely; otherwise the shared block is
    eliminated by a Schur complement over the banded state chain.
    """
    n = len(Hd)
    n_p = len(gp)
    Hd = Hd.copy()
    dsub = np.einsum("nii->ni", Hd)
    dsub += lam * np.clip(dsub, 1e-6, 1e32)
    Hpp = Hpp + np.diag(lam * np.clip(np.diag(Hpp), 1e-6, 1e32))
    if n < dense_below:
        return _solve_dense(Hd, Ho, Hsp, Hpp, gs, gp)
    try:
        cb = linalg.cholesky_banded(_banded(Hd, Ho), lower=False, check_finite=False)
    except linalg.LinAlgError:
        return None
    Hsp_f = Hsp.reshape(n * STATE_DIM, n_p)
    rhs = np.concatenate([Hsp_f, gs.reshape(-1, 1)], axis=1)
    X = linalg.cho_solve_banded((cb, False), rhs, check_finite=False)
    Xp, Xg = X[:, :n_p], X[:, n_p]
    S = Hpp - Hsp_f.T @ Xp
    b = -gp + Hsp_f.T @ Xg
    try:
        dp = linalg.solve(0.5 * (S + S.T), b, assume_a="pos", check_finite=False)
    except linalg.LinAlgError:
        return None
    ds = -Xg - Xp @ dp
    if not (np.all(np.isfinite(ds)) and np.all(np.isfinite(dp))):
        raise NumericalFailure("non-finite LM step")
    return ds.reshape(n, STATE_DIM), dp


def _repreintegrate(problem: FactorGraphProblem) -> int:
    """Re-preintegrate intervals whose bias moved past the first-order limits."""
    s = problem.x.states
    bad = np.flatnonzero(~bias_delta_ok(problem.preint, s.ba[:-1], s.bg[:-1]))
    if len(bad) == 0:
        return 0
    new = preintegrate_many(problem.imu, s.t[bad], s.t[bad + 1], s.ba[bad], s.bg[bad], problem.cfg.imu_noise)
    problem.preint = problem.preint.with_entries(bad, new)
    problem.imu_whiten = problem.imu_whiten.copy()
    problem.imu_whiten[bad] = _whitening(new.covariance)
    return len(bad)


@dataclass(frozen=True)
class OptimizeReport:
    iterations: int
    costs: list
    converged: bool
    reason: str
    rms_imu: float
    rms_mocap: float
    rms_bias: float
    n_mocap_factors: int
    n_degenerate_windows: int
    degenerate_windows: list
    n_repreintegrated: int
    rounds: int = 1


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(r * r))) if r.size else 0.0


def _levenberg_marquardt(problem: FactorGraphProblem, cfg: EstimatorConfig, lam: float, rel_tol: float | None = None):
    """Inner LM loop; returns (iterations, costs, reason, converged, n_repreintegrated, evaluation, lambda)."""
    ev = evaluate_cost(problem)
    if not np.isfinite(ev.cost):
        raise NumericalFailure("initial cost is not finite (MoCap factor outside the spline domain?)",
                               hint="check the initial time offset and MoCap coverage")
    costs = [ev.cost]
    reason, converged, n_re, it = "max_iterations", False, 0, 0
    for it in range(1, cfg.max_iterations + 1):
        Hd, Ho, Hsp, Hpp, gs, gp = _normal_equations(problem, problem.x)
        gmax = max(np.abs(gs).max(), np.abs(gp).max() if len(gp) else 0.0)
        if not np.isfinite(gmax):
            raise NumericalFailure("non-finite gradient")
        if gmax < cfg.grad_tol:
            reason, converged, it = "gradient", True, it - 1
            break
        accepted = False
        while lam <= cfg.max_lambda:
            step = _solve_step(Hd, Ho, Hsp, Hpp, gs, gp, lam)
            if step is None:
                lam *= 10.0
                continue
            x_new = problem.x.retract(*step)
            ev_new = evaluate_cost(problem, x_new)
            if np.isfinite(ev_new.cost) and ev_new.cost <= ev.cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            reason, converged, it = "stalled", True, it - 1
            break
        prev = ev.cost
        problem.x = x_new
        lam = max(lam / 10.0, 1e-12)
        k = _repreintegrate(problem)
        n_re += k
        ev = evaluate_cost(problem) if k else ev_new
        costs.append(ev.cost)
        if prev - ev_new.cost <= (cfg.rel_tol if rel_tol is None else rel_tol) * prev + cfg.abs_tol:
            reason, converged = "relative_decrease", True
            break
    return it, costs, reason, converged, n_re, ev, lam


def _calibration_delta(a: ExtrinsicState, b: ExtrinsicState) -> np.ndarray:
    """Tangent vector ``d`` with ``a.retract(d) == b``."""
    return np.concatenate([b.p_MI - a.p_MI, geo.so3_log(geo.quat_mul(geo.quat_conj(a.q_MI), b.q_MI)),
                           b.offset - a.offset])


def optimize(problem: FactorGraphProblem, cfg: EstimatorConfig | None = None) -> tuple[StateVector, OptimizeReport]:
    """Levenberg-Marquardt on the robust cost; returns the final iterate and a report.

    With degeneracy masking, MoCap factors inside degenerate windows see a frozen copy of
    the calibration, so the zeroed Jacobian blocks are exact; the copy is refreshed in
    outer rounds until the calibration stops moving. The problem's preintegrations may
    be refreshed in place when biases move.
    """
    cfg = problem.cfg if cfg is None else cfg
    problem.cfg = cfg
    masked = bool(np.any(problem.mocap_degenerate & problem.mocap_active))
    costs: list = []
    n_re = n_it = rounds = 0
    prev = None
    problem.frozen = problem.x.extrinsics if masked else None
    final = not masked
    while True:
        rounds += 1
        # intermediate rounds only need a rough inner solve
        tol = None if final else max(cfg.rel_tol, cfg.round_rel_tol)
        it, c, reason, converged, k, ev, _ = _levenberg_marquardt(problem, cfg, cfg.initial_lambda, tol)
        n_it += it
        n_re += k
        costs.extend(c if not costs else c[1:])
        if not converged or final:
            break
        d = _calibration_delta(problem.frozen, problem.x.extrinsics)
        norm = float(np.abs(d).max())
        if norm <= cfg.calib_tol:
            final = True
            problem.frozen = problem.x.extrinsics
            continue
        if rounds >= cfg.max_rounds:
            reason, converged = "max_rounds", False
            break
        # secant (Aitken-type) acceleration of the snapshot fixed-point update
        gain = 1.0
        if prev is not None:
            df = _calibration_delta(prev[0], problem.frozen)
            dr = d - prev[1]
            den = float(dr @ dr)
            if den > 0.0:
                gain = float(np.clip(-(df @ dr) / den, 0.5, 5.0))
        prev = (problem.frozen, d)
        problem.frozen = problem.frozen.retract(gain * d)

    if not converged:
        msg = f"LM stopped after {n_it} iterations ({reason}) without meeting the tolerances"
        if cfg.strict:
            raise NotConverged(msg, hint="raise max_iterations or improve the initialization")
        warnings.warn(msg)
    report = OptimizeReport(
        iterations=n_it,
        costs=costs,
        converged=converged,
        reason=reason,
        rms_imu=_rms(ev.r_imu),
        rms_mocap=_rms(ev.r_mocap),
        rms_bias=_rms(ev.r_bias),
        n_mocap_factors=int(problem.mocap_active.sum()),
        n_degenerate_windows=len(problem.degenerate_windows),
        degenerate_windows=list(problem.degenerate_windows),
        n_repreintegrated=n_re,
        rounds=rounds,
    )
    return problem.x, report


def extract_trajectory(states: StateVector | InertialState, rate: float) -> Trajectory:
    """Poses at ``rate`` on the IMU clock, constant-twist interpolated between states."""
    s = states.states if isinstance(states, StateVector) else states
    t = s.t
    if len(t) > 1 and abs(1.0 / np.median(np.diff(t)) - rate) <= 1e-9 * rate:
        return Trajectory(t.copy(), geo.Pose(s.q.copy(), s.p.copy()))
    n = int(np.floor((t[-1] - t[0]) * rate + 1e-9)) + 1
    tq = t[0] + np.arange(n) / rate
    k = np.clip(np.searchsorted(t, tq, side="right") - 1, 0, len(t) - 2)
    u = np.clip((tq - t[k]) / (t[k + 1] - t[k]), 0.0, 1.0)
    return Trajectory(tq, geo.pose_interpolate(s.pose[k], s.pose[k + 1], u))


@dataclass(frozen=True)
class EstimateResult:
    states: StateVector
    report: OptimizeReport
    init: InitResult
    problem: FactorGraphProblem


def estimate(imu: ImuData, mocap: MocapData, init_cfg: InitConfig | None = None,
             cfg: EstimatorConfig | None = None) -> EstimateResult:
    """Full pipeline: robust initialization, then batch optimization."""
    init_cfg = InitConfig() if init_cfg is None else init_cfg
    cfg = EstimatorConfig() if cfg is None else cfg
    init = ransac_initialize(imu, mocap, init_cfg)
    problem = build_problem(imu, mocap, init, cfg)
    states, report = optimize(problem, cfg)
    return EstimateResult(states, report, init, problem)
