"""Finite-difference verification of every analytic Jacobian block.

Used by ``gt-forge check-jacobians`` and the test suite. Each block is checked
on randomly drawn configurations with central differences taken through the
same retractions the optimizer uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry as geo
from .factors import (
    STATE_DIM,
    ExtrinsicState,
    GravityAlign,
    InertialState,
    bias_residuals,
    gravity_jacobian,
    gravity_vector,
    imu_residual,
    mocap_residual,
    mocap_tau,
)
from .preintegration import ImuData, ImuNoiseParams, preintegrate, preintegrate_many
from .spline import MocapData, build_spline

FD_STEP = 1e-6


@dataclass(frozen=True)
class BlockResult:
    name: str
    max_rel_error: float
    n_configs: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], dim: int, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` at the zero tangent vector."""
    cols = []
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        cols.append((f(e) - f(-e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def relative_error(J: np.ndarray, J_num: np.ndarray) -> float:
    scale = max(float(np.abs(J_num).max()), 1e-6)
    return float(np.abs(J - J_num).max()) / scale


# ---------------------------------------------------------------- random configurations


def _random_state(rng: np.random.Generator, t: float) -> InertialState:
    return InertialState(
        np.array(t),
        rng.normal(0.0, 1.0, 3),
        rng.normal(0.0, 1.0, 3),
        geo.quat_normalize(rng.normal(size=4)),
        rng.normal(0.0, 0.05, 3),
        rng.normal(0.0, 0.005, 3),
    )


def _random_imu(rng: np.random.Generator, duration: float, rate: float = 500.0) -> ImuData:
    n = int(round(duration * rate)) + 1
    t = np.arange(n) / rate
    acc = np.array([0.0, 0.0, 9.81]) + rng.normal(0.0, 2.0, 3) + rng.normal(0.0, 0.5, (n, 3))
    gyro = rng.normal(0.0, 1.0, 3) + rng.normal(0.0, 0.2, (n, 3))
    return ImuData(t, acc, gyro)


def _imu_config(rng: np.random.Generator):
    dt = rng.uniform(0.01, 0.1)
    imu = _random_imu(rng, dt)
    ba_lin = rng.normal(0.0, 0.05, 3)
    bg_lin = rng.normal(0.0, 0.005, 3)
    pre = preintegrate(imu, 0.0, dt, ba_lin, bg_lin, ImuNoiseParams())
    s0 = _random_state(rng, 0.0)
    s1 = _random_state(rng, dt)
    grav = GravityAlign(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.3, 0.3)))
    return s0, s1, grav, pre


def _random_spline(rng: np.random.Generator, n: int = 14, rate: float = 100.0):
    xi = np.concatenate([rng.normal(0.0, 0.8, 3), rng.normal(0.0, 1.5, 3)]) / rate
    T = geo.Pose(geo.quat_normalize(rng.normal(size=4)), rng.normal(0.0, 1.0, 3))
    qs, ps = [], []
    for _ in range(n):
        qs.append(T.q)
        ps.append(T.p)
        step = xi + np.concatenate([rng.normal(0.0, 0.004, 3), rng.normal(0.0, 0.01, 3)])
        T = T @ geo.Pose.exp(step)
    tau = rng.uniform(-5.0, 5.0) + np.arange(n) / rate
    return build_spline(MocapData(tau, np.array(qs), np.array(ps)))


def _mocap_config(rng: np.random.Generator):
    spline = _random_spline(rng)
    lo, hi = spline.domain
    m = int(rng.integers(1, 4))
    offset_t = np.sort(rng.uniform(0.0, 10.0, m)) if m > 1 else np.array([5.0])
    offset_t = offset_t + np.arange(m) * 1e-3  # keep knots distinct
    t = float(rng.uniform(offset_t[0] - 1.0, offset_t[-1] + 1.0))
    # choose offsets so that tau lands well inside the spline domain
    base = rng.uniform(lo + 0.02, hi - 0.02) - t
    offset = base + rng.normal(0.0, 1e-3, m)
    extr = ExtrinsicState(rng.normal(0.0, 0.2, 3), geo.quat_normalize(rng.normal(size=4)), offset_t, offset)
    s = _random_state(rng, t)
    if not spline.in_domain(mocap_tau(s, extr)):
        return _mocap_config(rng)
    return s, extr, spline


# ---------------------------------------------------------------- blocks


def _check_imu(rng):
    s0, s1, grav, pre = _imu_config(rng)
    _, (J0, J1, Jg) = imu_residual(s0, s1, grav, pre, jacobians=True)
    n0 = numeric_jacobian(lambda d: imu_residual(s0.retract(d), s1, grav, pre), STATE_DIM)
    n1 = numeric_jacobian(lambda d: imu_residual(s0, s1.retract(d), grav, pre), STATE_DIM)
    ng = numeric_jacobian(lambda d: imu_residual(s0, s1, grav.retract(d), pre), 2)
    return {"imu/state_k": relative_error(J0, n0), "imu/state_k1": relative_error(J1, n1),
            "imu/gravity": relative_error(Jg, ng)}


def _check_bias(rng):
    s0, s1, _, pre = _imu_config(rng)
    arw, grw = 1e-3, 1.3e-5
    _, (B0, B1) = bias_residuals(s0, s1, pre.dt, arw, grw, jacobians=True)
    n0 = numeric_jacobian(lambda d: bias_residuals(s0.retract(d), s1, pre.dt, arw, grw), STATE_DIM)
    n1 = numeric_jacobian(lambda d: bias_residuals(s0, s1.retract(d), pre.dt, arw, grw), STATE_DIM)
    return {"bias/state_k": relative_error(B0, n0), "bias/state_k1": relative_error(B1, n1)}


def _check_preint_bias(rng):
    dt = rng.uniform(0.01, 0.1)
    imu = _random_imu(rng, dt)
    b0 = np.concatenate([rng.normal(0.0, 0.05, 3), rng.normal(0.0, 0.005, 3)])
    # nominal plus +-h along each bias axis, integrated in one batch
    d = np.concatenate([np.zeros((1, 6)), FD_STEP * np.eye(6), -FD_STEP * np.eye(6)])
    b = b0 + d
    pre = preintegrate_many(imu, np.zeros(13), np.full(13, dt), b[:, :3], b[:, 3:])
    dq = geo.quat_mul(geo.quat_conj(pre.dq[0]), pre.dq)
    y = np.concatenate([pre.alpha, pre.beta, 2.0 * dq[:, 1:]], axis=1)
    num = ((y[1:7] - y[7:13]) / (2.0 * FD_STEP)).T
    return {"preintegration/bias": relative_error(pre.bias_jacobians[0], num)}


def _check_mocap(rng):
    s, extr, spline = _mocap_config(rng)
    _, (Js, Je, Joff, r_idx) = mocap_residual(s, extr, spline, jacobians=True)
    ns = numeric_jacobian(lambda d: mocap_residual(s.retract(d), extr, spline), STATE_DIM)
    ne = numeric_jacobian(lambda d: mocap_residual(s, extr.retract(np.concatenate([d, np.zeros(extr.n_offsets)])), spline), 6)

    m = extr.n_offsets

    def f_off(d):
        full = np.zeros(6 + m)
        full[6 + int(r_idx)] += d[0]
        if m > 1:
            full[6 + int(r_idx) + 1] += d[1]
        return mocap_residual(s, extr.retract(full), spline)

    no = numeric_jacobian(f_off, 2 if m > 1 else 1)
    Jo = Joff if m > 1 else Joff[..., :1]
    return {"mocap/state": relative_error(Js, ns), "mocap/extrinsics": relative_error(Je, ne),
            "mocap/time_offset": relative_error(Jo, no)}


def _check_gravity(rng):
    roll, pitch = rng.uniform(-1.2, 1.2, 2)
    J = gravity_jacobian(roll, pitch)
    num = numeric_jacobian(lambda d: gravity_vector(roll + d[0], pitch + d[1]), 2)
    return {"gravity/rollpitch": relative_error(J, num)}


CHECKS = (_check_imu, _check_bias, _check_mocap, _check_gravity, _check_preint_bias)


def check_all(n_configs: int = 100, seed: int = 0, tol: float = 1e-4) -> list[BlockResult]:
    """Worst relative error of every Jacobian block over ``n_configs`` random draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_configs):
        for check in CHECKS:
            for name, err in check(rng).items():
                worst[name] = max(worst.get(name, 0.0), err)
    return [BlockResult(name, err, n_configs, tol) for name, err in worst.items()]


__all__ = ["BlockResult", "check_all", "numeric_jacobian", "relative_error"]
