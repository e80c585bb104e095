"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from gt_forge import geometry as geo
from gt_forge.preintegration import ImuData


class SmoothImuSignal:
    """Band-limited body-frame specific force and angular rate (sums of sinusoids).

    Frequencies stay below 1.2 Hz, the band of the simulated excitation.
    """

    def __init__(self, rng, n_terms=3):
        self.freq = rng.uniform(0.2, 1.2, (2, n_terms, 3))
        self.phase = rng.uniform(0.0, 2 * np.pi, (2, n_terms, 3))
        self.amp_acc = rng.uniform(0.5, 3.0, (n_terms, 3))
        self.amp_gyr = rng.uniform(0.2, 1.5, (n_terms, 3))
        self.acc0 = np.array([0.0, 0.0, 9.81]) + rng.normal(0.0, 0.5, 3)

    def accel(self, t):
        t = np.asarray(t, dtype=float)[..., None, None]
        return self.acc0 + np.sum(self.amp_acc * np.sin(2 * np.pi * self.freq[0] * t + self.phase[0]), axis=-2)

    def gyro(self, t):
        t = np.asarray(t, dtype=float)[..., None, None]
        return np.sum(self.amp_gyr * np.sin(2 * np.pi * self.freq[1] * t + self.phase[1]), axis=-2)

    def sample(self, duration, rate):
        t = np.arange(int(round(duration * rate)) + 1) / rate
        return ImuData(t, self.accel(t), self.gyro(t))


def fine_preintegration(signal, t_i, t_j, rate=10_000.0):
    """RK4 integration of (alpha, beta, q) driven by the continuous signal."""
    n = max(int(np.ceil((t_j - t_i) * rate)), 1)
    h = (t_j - t_i) / n

    def deriv(t, y):
        q = geo.quat_normalize(y[6:10])
        w = signal.gyro(t)
        qdot = 0.5 * geo._quat_product(q, np.r_[0.0, w])
        return np.concatenate([y[3:6], geo.quat_rotate(q, signal.accel(t)), qdot])

    y = np.concatenate([np.zeros(6), geo.IDENTITY_QUAT])
    t = t_i
    for _ in range(n):
        k1 = deriv(t, y)
        k2 = deriv(t + h / 2, y + h / 2 * k1)
        k3 = deriv(t + h / 2, y + h / 2 * k2)
        k4 = deriv(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y[0:3], y[3:6], geo.quat_normalize(y[6:10])


def brute_force_degenerate(tau, q, w, varpi):
    """Flag each window [k w, (k+1) w) whose largest pairwise relative rotation is below varpi."""
    t0 = tau[0]
    n_win = int(np.floor((tau[-1] - t0) / w)) + 1  # the last window may be partial
    flagged = []
    for k in range(n_win):
        lo, hi = t0 + k * w, t0 + (k + 1) * w
        sel = (tau >= lo) & (tau < hi)
        qs = q[sel]
        worst = 0.0
        for a in range(len(qs)):
            rel = geo.quat_mul(geo.quat_conj(qs[a]), qs[a + 1:])
            if len(rel):
                worst = max(worst, float(geo.rotation_angle(rel).max()))
        flagged.append(worst < varpi)
    return np.array(flagged)


def truth_problem(sim, cfg=None, rate=100.0, t_end=None, knot_spacing=30.0, constant=False):
    """Factor graph built directly at the simulator's ground-truth states."""
    from gt_forge.estimator import EstimatorConfig, build_problem, offset_knot_times, truth_state_vector
    from gt_forge.initializer import InitResult

    cfg = cfg or EstimatorConfig(offset_knot_spacing=knot_spacing, constant_offset=constant)
    if t_end is None:
        t_end = sim.imu.t[-1] - 0.6
    t = np.arange(0.0, t_end, 1.0 / rate)
    knots = offset_knot_times(t[0], t[-1], cfg.offset_knot_spacing, cfg.constant_offset)
    x = truth_state_vector(sim, t, knots)
    tr = sim.truth
    init = InitResult(tr.extrinsics.q, tr.extrinsics.p, float(tr.offset(0.0)), tr.gravity, t, x.states.v,
                      np.ones(1, dtype=bool))
    return build_problem(sim.imu, sim.mocap, init, cfg, states=x)
