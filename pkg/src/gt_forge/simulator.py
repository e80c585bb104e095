"""Synthetic IMU / MoCap streams from a known trajectory.

Clock model: a MoCap timestamp relates to the IMU clock by
``tau = t + offset0 + (clock_drift / 60) * t``. MoCap measures the marker
body ``T_WM = T_WI T_MI^-1`` and the IMU measures specific force
``R_WI^T (a_W + g_W)`` with ``g_W`` the upward gravity reaction vector
(a level static device reads ``(0, 0, 9.81)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .preintegration import GRAVITY, ImuData, ImuNoiseParams
from .spline import MocapData, build_spline


def _default_extrinsics() -> geo.Pose:
    return geo.Pose(geo.so3_exp(np.array([0.10, -0.15, 0.20])), np.array([0.05, -0.03, 0.08]))


@dataclass
class SimConfig:
    duration: float = 60.0
    imu_rate: float = 500.0
    mocap_rate: float = 100.0
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    mocap_trans_noise_density: float = 4.3e-5  # m/sqrt(Hz)
    mocap_rot_noise_density: float = 1.7e-4  # rad/sqrt(Hz)
    true_extrinsics: geo.Pose = field(default_factory=_default_extrinsics)  # T_MI
    true_offset0: float = 0.4237  # s
    clock_drift: float = 2e-3  # s per minute
    gravity_rollpitch: tuple[float, float] = (0.03, -0.02)
    outlier_fraction: float = 0.0
    rng_seed: int = 0
    noise_scale: float = 1.0
    imu_noise_scale: float = 1.0
    mocap_noise_scale: float = 1.0
    initial_bias_a: tuple[float, float, float] = (0.0, 0.0, 0.0)
    initial_bias_g: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # base trajectory
    amplitude_pos: float = 0.5  # m
    amplitude_rot: float = np.deg2rad(30.0)  # rad
    motion_period: float | None = None  # alternate motion / stillness with this period
    motion_fraction: float = 1.0  # share of each period spent moving
    pure_translation: bool = False
    trajectory: str = "sinusoid"  # or "screw" (constant body twist)
    screw_twist: tuple = (0.3, 0.1, 0.05, 0.2, 0.3, 0.5)  # (rho m/s, omega rad/s)
    trajectory_file: str | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.imu_rate <= 0 or self.mocap_rate <= 0:
            raise ValueError("rates must be positive")
        if self.trajectory not in ("sinusoid", "screw"):
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")

    @property
    def imu_scale(self) -> float:
        return self.noise_scale * self.imu_noise_scale

    @property
    def mocap_scale(self) -> float:
        return self.noise_scale * self.mocap_noise_scale

    @property
    def gravity(self) -> np.ndarray:
        return gravity_from_rollpitch(*self.gravity_rollpitch)


def gravity_from_rollpitch(roll: float, pitch: float) -> np.ndarray:
    return geo.quat_rotate(geo.rollpitch_to_quat(roll, pitch), np.array([0.0, 0.0, GRAVITY]))


@dataclass(frozen=True)
class KinematicState:
    pose: geo.Pose  # T_WI
    vel: np.ndarray  # world m/s
    acc: np.ndarray  # world m/s^2 (kinematic, gravity excluded)
    omega: np.ndarray  # body rad/s


class SinusoidTrajectory:
    """Six-DoF sinusoidal excitation, optionally gated into motion / still phases.

    Gating is a time warp ``s(t)``: the base motion is evaluated at ``s`` and
    ``ds/dt`` drops smoothly to zero during still phases.
    """

    pos_freq = np.array([0.31, 0.53, 0.71])
    rot_freq = np.array([0.43, 0.83, 1.07])
    pos_phase = np.array([0.0, 1.1, 2.3])
    rot_phase = np.array([0.7, 1.9, 2.9])
    center = np.array([0.0, 0.0, 1.2])
    base_rot = np.array([0.0, 0.0, 0.4])

    def __init__(self, amplitude_pos=0.5, amplitude_rot=np.deg2rad(30.0), motion_period=None,
                 motion_fraction=1.0, pure_translation=False):
        self.amp_p = float(amplitude_pos)
        self.amp_r = 0.0 if pure_translation else float(amplitude_rot)
        self.period = motion_period
        self.fraction = motion_fraction
        self.q0 = geo.so3_exp(self.base_rot)

    def _warp(self, t):
        t = np.asarray(t, dtype=float)
        if self.period is None or self.fraction >= 1.0:
            return t, np.ones_like(t), np.zeros_like(t)
        T, Tm = self.period, self.period * self.fraction
        c = np.floor(t / T)
        x = t - c * T
        moving = x < Tm
        xm = np.minimum(x, Tm)
        w = 2.0 * np.pi / Tm
        # ds/dt = 0.5 (1 - cos(w x)) while moving; s advances Tm / 2 per cycle
        s = c * 0.5 * Tm + 0.5 * (xm - np.sin(w * xm) / w)
        sd = np.where(moving, 0.5 * (1.0 - np.cos(w * x)), 0.0)
        sdd = np.where(moving, 0.5 * w * np.sin(w * x), 0.0)
        return s, sd, sdd

    def _base(self, s):
        s = np.asarray(s, dtype=float)[..., None]
        wp = 2.0 * np.pi * self.pos_freq
        wr = 2.0 * np.pi * self.rot_freq
        p = self.center + self.amp_p * np.sin(wp * s + self.pos_phase)
        dp = self.amp_p * wp * np.cos(wp * s + self.pos_phase)
        ddp = -self.amp_p * wp**2 * np.sin(wp * s + self.pos_phase)
        phi = self.amp_r * np.sin(wr * s + self.rot_phase)
        dphi = self.amp_r * wr * np.cos(wr * s + self.rot_phase)
        return p, dp, ddp, phi, dphi

    def position(self, t):
        s, _, _ = self._warp(t)
        return self._base(s)[0]

    def state(self, t) -> KinematicState:
        s, sd, sdd = self._warp(t)
        p, dp, ddp, phi, dphi = self._base(s)
        sd = sd[..., None]
        sdd = sdd[..., None]
        q = geo.quat_mul(self.q0, geo.so3_exp(phi))
        omega = np.einsum("...ij,...j->...i", geo.so3_right_jacobian(phi), dphi) * sd
        return KinematicState(geo.Pose(q, p), dp * sd, ddp * sd**2 + dp * sdd, omega)


class ScrewTrajectory:
    """Constant body twist ``T(t) = T0 exp(t xi)``; a cubic pose spline reproduces it exactly."""

    def __init__(self, twist, T0: geo.Pose | None = None):
        self.xi = np.asarray(twist, dtype=float)
        self.T0 = T0 if T0 is not None else geo.Pose(geo.so3_exp(np.array([0.0, 0.0, 0.4])), np.array([0.0, 0.0, 1.2]))

    def position(self, t):
        return self.state(t).pose.p

    def state(self, t) -> KinematicState:
        t = np.asarray(t, dtype=float)
        T = self.T0 @ geo.Pose.exp(t[..., None] * self.xi)
        rho, w = self.xi[:3], self.xi[3:]
        vel = geo.quat_rotate(T.q, np.broadcast_to(rho, T.p.shape))
        acc = geo.quat_rotate(T.q, np.broadcast_to(np.cross(w, rho), T.p.shape))
        return KinematicState(T, vel, acc, np.broadcast_to(w, T.p.shape).copy())


class SplineBasisTrajectory:
    """Basis trajectory from recorded poses (e.g. a TUM file) through a pose spline."""

    def __init__(self, times, poses: geo.Pose):
        self.spline = build_spline(MocapData(times, poses.q, poses.p))
        lo, hi = self.spline.domain
        self.t0 = lo
        self.span = hi - lo - 1e-9
        self.h = 1e-3 * self.spline.dt_knot

    def _tau(self, t):
        return self.t0 + np.clip(np.asarray(t, dtype=float), 0.0, self.span)

    def position(self, t):
        return self.spline.evaluate(self._tau(t)).p

    def state(self, t) -> KinematicState:
        tau = self._tau(t)
        T, V = self.spline.pose_and_twist(tau)
        vel = geo.quat_rotate(T.q, V[..., :3])
        lo = np.maximum(tau - self.h, self.t0)
        hi = np.minimum(tau + self.h, self.t0 + self.span)
        v_hi, _ = self.spline.velocity(hi)
        v_lo, _ = self.spline.velocity(lo)
        acc = (v_hi - v_lo) / (hi - lo)[..., None]
        return KinematicState(T, vel, acc, V[..., 3:])


def gen_trajectory(cfg: SimConfig):
    """Analytic sinusoidal trajectory, or a spline through ``cfg.trajectory_file``."""
    if cfg.trajectory_file is not None:
        from .io import read_tum

        traj = read_tum(cfg.trajectory_file)
        return SplineBasisTrajectory(traj.t - traj.t[0], traj.poses)
    if cfg.trajectory == "screw":
        return ScrewTrajectory(cfg.screw_twist)
    return SinusoidTrajectory(cfg.amplitude_pos, cfg.amplitude_rot, cfg.motion_period, cfg.motion_fraction,
                              cfg.pure_translation)


@dataclass(frozen=True)
class Truth:
    t: np.ndarray  # IMU clock
    pose: geo.Pose  # T_WI
    vel: np.ndarray
    bias_a: np.ndarray
    bias_g: np.ndarray
    extrinsics: geo.Pose  # T_MI
    gravity: np.ndarray  # g_W
    offset0: float
    clock_drift: float  # s per minute

    def offset(self, t) -> np.ndarray:
        """True ``t_MI(t)`` so that ``tau = t + t_MI(t)``."""
        return self.offset0 + self.clock_drift / 60.0 * np.asarray(t, dtype=float)

    def trajectory(self):
        from .metrics import Trajectory

        return Trajectory(self.t, self.pose)


@dataclass(frozen=True)
class SimOutput:
    imu: ImuData
    mocap: MocapData
    truth: Truth
    outlier_mask: np.ndarray  # per MoCap sample
    traj: object = None  # trajectory handle used for generation

    def state_at(self, t) -> tuple[KinematicState, np.ndarray, np.ndarray]:
        """Exact kinematics and (linearly interpolated) biases at IMU-clock times ``t``."""
        t = np.asarray(t, dtype=float)
        ba = np.stack([np.interp(t, self.truth.t, self.truth.bias_a[:, i]) for i in range(3)], axis=-1)
        bg = np.stack([np.interp(t, self.truth.t, self.truth.bias_g[:, i]) for i in range(3)], axis=-1)
        return self.traj.state(t), ba, bg


def _streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def synth_imu(traj, cfg: SimConfig, rng_noise=None, rng_bias=None):
    """IMU samples plus the true bias trajectories."""
    if rng_noise is None or rng_bias is None:
        rng_noise, rng_bias, _, _ = _streams(cfg.rng_seed)
    n = int(round(cfg.duration * cfg.imu_rate)) + 1
    t = np.arange(n) / cfg.imu_rate
    st = traj.state(t)
    g_W = cfg.gravity
    q_inv = geo.quat_conj(st.pose.q)
    accel = geo.quat_rotate(q_inv, st.acc + g_W)
    gyro = st.omega.copy()

    s = cfg.imu_scale
    nz = cfg.imu_noise
    dt = 1.0 / cfg.imu_rate
    steps_a = rng_bias.standard_normal((n, 3)) * nz.accel_random_walk * np.sqrt(dt) * s
    steps_g = rng_bias.standard_normal((n, 3)) * nz.gyro_random_walk * np.sqrt(dt) * s
    steps_a[0] = 0.0
    steps_g[0] = 0.0
    bias_a = np.asarray(cfg.initial_bias_a) + np.cumsum(steps_a, axis=0)
    bias_g = np.asarray(cfg.initial_bias_g) + np.cumsum(steps_g, axis=0)
    white_a = rng_noise.standard_normal((n, 3)) * nz.accel_noise_density * np.sqrt(cfg.imu_rate) * s
    white_g = rng_noise.standard_normal((n, 3)) * nz.gyro_noise_density * np.sqrt(cfg.imu_rate) * s
    imu = ImuData(t, accel + bias_a + white_a, gyro + bias_g + white_g)
    return imu, bias_a, bias_g, st


def synth_mocap(traj, cfg: SimConfig, rng_noise=None, rng_outlier=None):
    """MoCap samples on the MoCap clock and the outlier mask."""
    if rng_noise is None or rng_outlier is None:
        _, _, rng_noise, rng_outlier = _streams(cfg.rng_seed)
    scale = 1.0 + cfg.clock_drift / 60.0
    tau_lo = cfg.true_offset0
    tau_hi = cfg.true_offset0 + scale * cfg.duration
    k0 = int(np.ceil(tau_lo * cfg.mocap_rate - 1e-9))
    k1 = int(np.floor(tau_hi * cfg.mocap_rate + 1e-9))
    tau = np.arange(k0, k1 + 1) / cfg.mocap_rate
    t = (tau - cfg.true_offset0) / scale
    T_WI = traj.state(t).pose
    T_WM = T_WI @ cfg.true_extrinsics.inverse()

    s = cfg.mocap_scale
    n = len(tau)
    sig_p = cfg.mocap_trans_noise_density * np.sqrt(cfg.mocap_rate) * s
    sig_r = cfg.mocap_rot_noise_density * np.sqrt(cfg.mocap_rate) * s
    p = T_WM.p + rng_noise.standard_normal((n, 3)) * sig_p
    q = geo.quat_mul(T_WM.q, geo.so3_exp(rng_noise.standard_normal((n, 3)) * sig_r))

    mask = np.zeros(n, dtype=bool)
    n_out = int(round(cfg.outlier_fraction * n))
    if n_out:
        idx = rng_outlier.choice(n, size=n_out, replace=False)
        mask[idx] = True
        center = T_WM.p.mean(axis=0)
        p[idx] = center + rng_outlier.uniform(-1.0, 1.0, size=(n_out, 3))
        q[idx] = geo.quat_normalize(rng_outlier.standard_normal((n_out, 4)))
    return MocapData(tau, q, p), mask


def simulate(cfg: SimConfig | None = None) -> SimOutput:
    cfg = cfg or SimConfig()
    rng_imu, rng_bias, rng_mocap, rng_out = _streams(cfg.rng_seed)
    traj = gen_trajectory(cfg)
    imu, bias_a, bias_g, st = synth_imu(traj, cfg, rng_imu, rng_bias)
    mocap, mask = synth_mocap(traj, cfg, rng_mocap, rng_out)
    truth = Truth(
        t=imu.t,
        pose=st.pose,
        vel=st.vel,
        bias_a=bias_a,
        bias_g=bias_g,
        extrinsics=cfg.true_extrinsics,
        gravity=cfg.gravity,
        offset0=cfg.true_offset0,
        clock_drift=cfg.clock_drift,
    )
    return SimOutput(imu=imu, mocap=mocap, truth=truth, outlier_mask=mask, traj=traj)
