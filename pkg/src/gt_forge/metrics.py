"""Trajectory association, rigid alignment and ATE / ARE / RTE / RRE."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import DegenerateGeometry, NoOverlap


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    poses: geo.Pose

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        if len(t) != len(self.poses):
            raise ValueError("time and pose counts differ")
        if len(t) > 1 and np.any(np.diff(t) <= 0.0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)

    def __len__(self) -> int:
        return len(self.t)

    def interpolate(self, tq) -> geo.Pose:
        """Constant-twist interpolation (held at the ends)."""
        tq = np.asarray(tq, dtype=float)
        if len(self.t) == 1:
            return self.poses[np.zeros(tq.shape, dtype=int)]
        k = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        s = np.clip((tq - self.t[k]) / (self.t[k + 1] - self.t[k]), 0.0, 1.0)
        return geo.pose_interpolate(self.poses[k], self.poses[k + 1], s)

    def nearest_gap(self, tq) -> np.ndarray:
        """Distance from each query time to the nearest sample."""
        tq = np.asarray(tq, dtype=float)
        k = np.clip(np.searchsorted(self.t, tq), 1, len(self.t) - 1) if len(self.t) > 1 else np.zeros(tq.shape, int)
        if len(self.t) == 1:
            return np.abs(tq - self.t[0])
        return np.minimum(np.abs(tq - self.t[k - 1]), np.abs(tq - self.t[k]))

    def transformed(self, T: geo.Pose) -> "Trajectory":
        """Left-multiply every pose by ``T``."""
        return Trajectory(self.t, T @ self.poses)


@dataclass(frozen=True)
class PairedPoses:
    t: np.ndarray
    est: geo.Pose
    ref: geo.Pose
    rate: float

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class MetricReport:
    ate_rmse: float
    are_rmse: float
    rte_rmse: float
    rre_rmse: float
    n_associated: int
    alignment: geo.Pose

    def as_row(self) -> dict:
        return {
            "ate_rmse_m": self.ate_rmse,
            "are_rmse_deg": np.degrees(self.are_rmse),
            "rte_rmse_m": self.rte_rmse,
            "rre_rmse_deg": np.degrees(self.rre_rmse),
            "n_associated": self.n_associated,
        }


def associate_and_resample(est: Trajectory, ref: Trajectory, rate: float = 50.0, max_dt: float = 0.02) -> PairedPoses:
    """Resample both trajectories on a common ``rate`` grid over their overlap."""
    lo = max(est.t[0], ref.t[0])
    hi = min(est.t[-1], ref.t[-1])
    if hi < lo:
        raise NoOverlap(f"est [{est.t[0]:.3f}, {est.t[-1]:.3f}] s and ref [{ref.t[0]:.3f}, {ref.t[-1]:.3f}] s are disjoint")
    k0 = int(np.ceil(lo * rate - 1e-6))
    k1 = int(np.floor(hi * rate + 1e-6))
    grid = np.arange(k0, k1 + 1) / rate
    grid = grid[(grid >= lo - 1e-9) & (grid <= hi + 1e-9)]
    keep = (est.nearest_gap(grid) <= max_dt + 1e-12) & (ref.nearest_gap(grid) <= max_dt + 1e-12)
    grid = grid[keep]
    if len(grid) < 2:
        raise NoOverlap(f"only {len(grid)} associated samples within max_dt={max_dt} s")
    return PairedPoses(grid, est.interpolate(grid), ref.interpolate(grid), rate)


def align_se3(pairs: PairedPoses) -> geo.Pose:
    """Rigid ``T`` minimizing ``sum |p_ref - T p_est|^2`` (no scale)."""
    pe = pairs.est.p
    pr = pairs.ref.p
    me, mr = pe.mean(axis=0), pr.mean(axis=0)
    E, Rf = pe - me, pr - mr
    s = np.linalg.svd(E, compute_uv=False)
    if len(pe) < 3 or s[1] <= 1e-9 * max(s[0], 1e-300):
        warnings.warn("positions are collinear; rotation about the line is unconstrained", DegenerateGeometry)
    U, _, Vt = np.linalg.svd(Rf.T @ E)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return geo.Pose(geo.rotmat_to_quat(R), mr - R @ me)


def absolute_errors(pairs: PairedPoses, alignment: geo.Pose | None = None) -> tuple[float, float]:
    """ATE (m) and ARE (rad) RMSE after applying ``alignment`` to the estimate."""
    est = pairs.est if alignment is None else alignment @ pairs.est
    dp = np.linalg.norm(pairs.ref.p - est.p, axis=1)
    ang = geo.rotation_angle(geo.quat_mul(geo.quat_conj(pairs.ref.q), est.q))
    return float(np.sqrt(np.mean(dp**2))), float(np.sqrt(np.mean(ang**2)))


def relative_errors(pairs: PairedPoses, delta: float | None = None) -> tuple[float, float]:
    """RTE (m) and RRE (rad) RMSE of relative motions ``delta`` seconds apart (default one frame)."""
    delta = 1.0 / pairs.rate if delta is None else float(delta)
    t = pairs.t
    j = np.searchsorted(t, t + delta - 1e-6)
    j = np.minimum(j, len(t) - 1)
    ok = np.abs(t[j] - t - delta) <= 1e-6
    i = np.flatnonzero(ok)
    j = j[ok]
    if len(i) == 0:
        return 0.0, 0.0
    d_ref = pairs.ref[i].inverse() @ pairs.ref[j]
    d_est = pairs.est[i].inverse() @ pairs.est[j]
    E = d_ref.inverse() @ d_est
    return float(np.sqrt(np.mean(np.sum(E.p**2, axis=1)))), float(np.sqrt(np.mean(geo.rotation_angle(E.q) ** 2)))


def evaluate(est: Trajectory, ref: Trajectory, rate: float = 50.0, max_dt: float = 0.02, align: bool = True,
             delta: float | None = None) -> MetricReport:
    pairs = associate_and_resample(est, ref, rate, max_dt)
    T = align_se3(pairs) if align else geo.Pose.identity()
    ate, are = absolute_errors(pairs, T)
    rte, rre = relative_errors(pairs, delta)
    return MetricReport(ate, are, rte, rre, len(pairs), T)
