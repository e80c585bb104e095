"""Uniform cumulative cubic B-spline on SE(3) over MoCap poses.

The control points are the MoCap poses themselves (resampled onto a uniform
grid when the input timing wobbles). For a query in segment ``i`` with phase
``u``::

    T(tau) = T_i · exp(B1 d_i) · exp(B2 d_{i+1}) · exp(B3 d_{i+2}),
    d_k = log(T_k^-1 T_{k+1})

so the segment ``[tau_{i+1}, tau_{i+2})`` is governed by knots ``i .. i+3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import GapTooLarge, OutOfDomain, RelativeRotationNearPi, TooFewSamples

# cumulative basis, rows multiply [1, u, u^2, u^3]
BASIS_MATRIX = np.array(
    [
        [6.0, 5.0, 1.0, 0.0],
        [0.0, 3.0, 3.0, 0.0],
        [0.0, -3.0, 3.0, 0.0],
        [0.0, 1.0, -2.0, 1.0],
    ]
) / 6.0

UNIFORM_TOL = 1e-4
MAX_GAP_PERIODS = 3.0
NEAR_PI_MARGIN = 1e-3


@dataclass(frozen=True)
class MocapData:
    """MoCap pose stream ``T_WM`` stamped on the MoCap clock."""

    tau: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        q = geo.quat_normalize(np.asarray(self.q, dtype=float).reshape(-1, 4))
        p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if not (len(tau) == len(q) == len(p)):
            raise ValueError("tau, q and p must have the same length")
        if len(tau) > 1 and np.any(np.diff(tau) <= 0.0):
            raise ValueError("MoCap timestamps must be strictly increasing")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return len(self.tau)

    @property
    def poses(self) -> geo.Pose:
        return geo.Pose(self.q, self.p)

    @property
    def nominal_rate(self) -> float:
        return 1.0 / float(np.median(np.diff(self.tau)))

    def interpolate(self, tq) -> geo.Pose:
        """Constant-twist interpolation between bracketing samples (held at the ends)."""
        tq = np.asarray(tq, dtype=float)
        k = np.clip(np.searchsorted(self.tau, tq, side="right") - 1, 0, len(self.tau) - 2)
        s = np.clip((tq - self.tau[k]) / (self.tau[k + 1] - self.tau[k]), 0.0, 1.0)
        return geo.pose_interpolate(self.poses[k], self.poses[k + 1], s)

    def slice(self, mask) -> "MocapData":
        return MocapData(self.tau[mask], self.q[mask], self.p[mask])


@dataclass(frozen=True)
class BasisWeights:
    B: np.ndarray  # (..., 4), B[..., 0] == 1
    dB: np.ndarray  # (..., 4), d/dtau in 1/s
    u: np.ndarray


def basis_from_phase(u, dt_knot: float) -> BasisWeights:
    u = np.asarray(u, dtype=float)
    mono = np.stack([np.ones_like(u), u, u * u, u * u * u], axis=-1)
    dmono = np.stack([np.zeros_like(u), np.ones_like(u), 2.0 * u, 3.0 * u * u], axis=-1)
    return BasisWeights(B=mono @ BASIS_MATRIX, dB=(dmono @ BASIS_MATRIX) / dt_knot, u=u)


@dataclass(frozen=True)
class PoseSpline:
    knots_q: np.ndarray  # (K, 4)
    knots_p: np.ndarray  # (K, 3)
    tau0: float
    dt_knot: float
    rel_twist: np.ndarray  # (K-1, 6), log(T_k^-1 T_{k+1})

    @property
    def n_knots(self) -> int:
        return len(self.knots_q)

    @property
    def knot_times(self) -> np.ndarray:
        return self.tau0 + self.dt_knot * np.arange(self.n_knots)

    @property
    def domain(self) -> tuple[float, float]:
        """Valid half-open query interval ``[lo, hi)``."""
        return self.tau0 + self.dt_knot, self.tau0 + (self.n_knots - 2) * self.dt_knot

    def in_domain(self, tau) -> np.ndarray:
        s = (np.asarray(tau, dtype=float) - self.tau0) / self.dt_knot
        return (s >= 1.0) & (s < self.n_knots - 2)

    def locate(self, tau) -> tuple[np.ndarray, np.ndarray]:
        """Segment index and phase; raises :class:`OutOfDomain`."""
        tau = np.asarray(tau, dtype=float)
        ok = self.in_domain(tau)
        if not np.all(ok):
            bad = np.asarray(tau)[~ok].ravel()[0] if tau.ndim else float(tau)
            lo, hi = self.domain
            raise OutOfDomain(f"tau={bad:.6f} s outside spline domain [{lo:.6f}, {hi:.6f})")
        s = (tau - self.tau0) / self.dt_knot
        f = np.floor(s)
        return f.astype(int) - 1, s - f

    def basis(self, tau) -> BasisWeights:
        _, u = self.locate(tau)
        return basis_from_phase(u, self.dt_knot)

    def evaluate_segment(self, i, u) -> geo.Pose:
        """Evaluate segment ``i`` at phase ``u`` (``u = 1`` allowed)."""
        i = np.asarray(i)
        w = basis_from_phase(u, self.dt_knot)
        T = geo.Pose(self.knots_q[i], self.knots_p[i])
        for j in range(1, 4):
            T = T @ geo.Pose.exp(w.B[..., j : j + 1] * self.rel_twist[i + j - 1])
        return T

    def body_twist_segment(self, i, u) -> tuple[geo.Pose, np.ndarray]:
        """Pose and body-frame twist ``[R^T p_dot, omega]`` on segment ``i``."""
        i = np.asarray(i)
        w = basis_from_phase(u, self.dt_knot)
        T = geo.Pose(self.knots_q[i], self.knots_p[i])
        V = np.zeros(np.shape(u) + (6,))
        for j in range(1, 4):
            xi = self.rel_twist[i + j - 1]
            A = geo.Pose.exp(w.B[..., j : j + 1] * xi)
            Ainv = A.inverse()
            V = np.einsum("...ij,...j->...i", geo.se3_adjoint(Ainv.q, Ainv.p), V) + w.dB[..., j : j + 1] * xi
            T = T @ A
        return T, V

    def evaluate(self, tau) -> geo.Pose:
        i, u = self.locate(tau)
        return self.evaluate_segment(i, u)

    def velocity(self, tau) -> tuple[np.ndarray, np.ndarray]:
        """World-frame ``p_dot`` (m/s) and raw quaternion derivative ``q_dot`` (1/s)."""
        i, u = self.locate(tau)
        T, V = self.body_twist_segment(i, u)
        p_dot = geo.quat_rotate(T.q, V[..., :3])
        omega_q = np.concatenate([np.zeros(V.shape[:-1] + (1,)), V[..., 3:]], axis=-1)
        q_dot = 0.5 * geo._quat_product(T.q, omega_q)
        return p_dot, q_dot

    def pose_and_twist(self, tau) -> tuple[geo.Pose, np.ndarray]:
        i, u = self.locate(tau)
        return self.body_twist_segment(i, u)


def _resample_uniform(tau: np.ndarray, poses: geo.Pose, dt: float) -> tuple[np.ndarray, geo.Pose]:
    n = int(np.floor((tau[-1] - tau[0]) / dt + 1e-9)) + 1
    grid = tau[0] + dt * np.arange(n)
    k = np.clip(np.searchsorted(tau, grid, side="right") - 1, 0, len(tau) - 2)
    s = np.clip((grid - tau[k]) / (tau[k + 1] - tau[k]), 0.0, 1.0)
    return grid, geo.pose_interpolate(poses[k], poses[k + 1], s)


def build_spline(samples: MocapData) -> PoseSpline:
    """Build the pose spline, resampling to a uniform grid if needed."""
    if len(samples) < 4:
        raise TooFewSamples(f"got {len(samples)} MoCap samples, need at least 4")
    tau = samples.tau
    gaps = np.diff(tau)
    dt = float(np.median(gaps))
    worst = int(np.argmax(gaps))
    if gaps[worst] > MAX_GAP_PERIODS * dt:
        raise GapTooLarge(
            f"MoCap gap of {gaps[worst]:.4f} s at tau={tau[worst]:.6f} s exceeds {MAX_GAP_PERIODS:g} periods ({dt:.4f} s)"
        )
    poses = samples.poses
    if np.max(np.abs(gaps - dt)) > UNIFORM_TOL * dt:
        tau, poses = _resample_uniform(tau, poses, dt)
        if len(tau) < 4:
            raise TooFewSamples(f"only {len(tau)} knots after resampling")

    q = poses.q.copy()
    p = poses.p.copy()
    rel = geo.Pose(q[:-1], p[:-1]).inverse() @ geo.Pose(q[1:], p[1:])
    angles = geo.rotation_angle(rel.q)
    if np.any(angles >= np.pi - NEAR_PI_MARGIN):
        k = int(np.argmax(angles))
        raise RelativeRotationNearPi(f"knots {k}->{k + 1} at tau={tau[k]:.6f} s rotate by {angles[k]:.4f} rad")
    return PoseSpline(knots_q=q, knots_p=p, tau0=float(tau[0]), dt_knot=dt, rel_twist=rel.log(check=False))


class SplineSet:
    """Pose splines over the gap-free segments of one MoCap stream.

    Queries falling into a gap (or outside every segment's domain) are
    reported by :meth:`in_domain`; the estimator drops those factors.
    """

    def __init__(self, splines: list[PoseSpline]):
        if not splines:
            raise TooFewSamples("no MoCap segment long enough for a spline")
        self.splines = splines
        self._lo = np.array([s.domain[0] for s in splines])
        self._hi = np.array([s.domain[1] for s in splines])

    @property
    def domain(self) -> tuple[float, float]:
        return float(self._lo[0]), float(self._hi[-1])

    def segment_of(self, tau) -> np.ndarray:
        """Index of the spline whose domain holds ``tau``, or -1."""
        tau = np.asarray(tau, dtype=float)
        k = np.searchsorted(self._lo, tau, side="right") - 1
        kc = np.clip(k, 0, len(self.splines) - 1)
        ok = (k >= 0) & (tau < self._hi[kc])
        return np.where(ok, kc, -1)

    def in_domain(self, tau) -> np.ndarray:
        return self.segment_of(tau) >= 0

    def _dispatch(self, tau, fn):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        seg = self.segment_of(tau)
        if np.any(seg < 0):
            bad = tau[seg < 0][0]
            raise OutOfDomain(f"tau={bad:.6f} s outside every MoCap spline segment")
        outs = None
        for s in np.unique(seg):
            sel = seg == s
            res = fn(self.splines[s], tau[sel])
            if outs is None:
                outs = [np.zeros((len(tau),) + np.shape(r)[1:]) for r in res]
            for o, r in zip(outs, res):
                o[sel] = r
        return outs

    def evaluate(self, tau) -> geo.Pose:
        q, p = self._dispatch(tau, lambda s, t: (lambda T: (T.q, T.p))(s.evaluate(t)))
        return geo.Pose(q, p)

    def velocity(self, tau):
        return tuple(self._dispatch(tau, lambda s, t: s.velocity(t)))

    def pose_and_twist(self, tau):
        q, p, V = self._dispatch(tau, lambda s, t: (lambda T, V: (T.q, T.p, V))(*s.pose_and_twist(t)))
        return geo.Pose(q, p), V


def build_spline_set(samples: MocapData, min_samples: int = 4) -> SplineSet:
    """Split ``samples`` at gaps longer than the allowed maximum and spline each piece."""
    gaps = np.diff(samples.tau)
    dt = float(np.median(gaps))
    cuts = np.flatnonzero(gaps > MAX_GAP_PERIODS * dt) + 1
    bounds = np.concatenate([[0], cuts, [len(samples)]])
    splines = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a >= min_samples:
            idx = np.arange(a, b)
            splines.append(build_spline(samples.slice(idx)))
    return SplineSet(splines)
