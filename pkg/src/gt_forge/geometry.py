"""Quaternion, SO(3) and SE(3) primitives.

Conventions
-----------
* Hamilton quaternions, scalar first: ``q = [w, x, y, z]``.
* Passive frame transforms: ``R_AB`` maps coordinates expressed in B into A,
  and a pose ``T_AB = (q_AB, p_AB)`` maps ``x_B`` to ``R_AB x_B + p_AB``.
* se(3) coordinates are ordered ``xi = [rho, phi]`` (translation first).
* Rotation perturbations are right-multiplicative, ``q <- q ⊗ exp(dtheta)``.

All functions broadcast over leading dimensions, so the same code path serves
single values and whole trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

SMALL_ANGLE = 1e-6
NEAR_PI = 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator: ``skew(a) @ b == cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Pick the double-cover representative with ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


quat_inv = quat_conj


def _quat_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``, renormalized."""
    return quat_normalize(_quat_product(a, b))


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """``[q]_L`` with ``[a]_L @ b == a ⊗ b``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """``[q]_R`` with ``[b]_R @ a == a ⊗ b``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, batched. Output canonicalized to ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    trace = m00 + m11 + m22
    cand = np.stack([trace, m00, m11, m22], axis=-1)
    pick = np.argmax(cand, axis=-1)
    q = np.empty((R.shape[0], 4))
    for k in range(4):
        sel = pick == k
        if not np.any(sel):
            continue
        M = R[sel]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + trace[sel])
            q[sel] = np.stack(
                [0.25 * s, (M[:, 2, 1] - M[:, 1, 2]) / s, (M[:, 0, 2] - M[:, 2, 0]) / s, (M[:, 1, 0] - M[:, 0, 1]) / s],
                axis=-1,
            )
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + M[:, 0, 0] - M[:, 1, 1] - M[:, 2, 2])
            q[sel] = np.stack(
                [(M[:, 2, 1] - M[:, 1, 2]) / s, 0.25 * s, (M[:, 0, 1] + M[:, 1, 0]) / s, (M[:, 0, 2] + M[:, 2, 0]) / s],
                axis=-1,
            )
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + M[:, 1, 1] - M[:, 0, 0] - M[:, 2, 2])
            q[sel] = np.stack(
                [(M[:, 0, 2] - M[:, 2, 0]) / s, (M[:, 0, 1] + M[:, 1, 0]) / s, 0.25 * s, (M[:, 1, 2] + M[:, 2, 1]) / s],
                axis=-1,
            )
        else:
            s = 2.0 * np.sqrt(1.0 + M[:, 2, 2] - M[:, 0, 0] - M[:, 1, 1])
            q[sel] = np.stack(
                [(M[:, 1, 0] - M[:, 0, 1]) / s, (M[:, 0, 2] + M[:, 2, 0]) / s, (M[:, 1, 2] + M[:, 2, 1]) / s, 0.25 * s],
                axis=-1,
            )
    q = quat_canonical(quat_normalize(q))
    return q.reshape(shape + (4,))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) ``v`` by ``q`` (i.e. ``R(q) @ v``)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation vector to unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(0.5 * theta))
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * theta) / safe)
    return quat_normalize(np.concatenate([w, k * phi], axis=-1))


def so3_log(q: np.ndarray, check: bool = True) -> np.ndarray:
    """Unit quaternion to rotation vector, angle in ``[0, pi]``.

    Raises :class:`AngleNearPi` when the rotation angle is within ``1e-6`` of
    pi and ``check`` is set.
    """
    q = quat_canonical(quat_normalize(q))
    w = q[..., :1]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(n, w)
    if check and np.any(theta > np.pi - NEAR_PI):
        raise AngleNearPi(f"rotation angle {float(np.max(theta)):.9f} rad is within {NEAR_PI} of pi")
    small = theta < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    k = np.where(small, 2.0 / safe_w - 2.0 * n**2 / (3.0 * safe_w**3), theta / safe_n)
    return k * v


def rotation_angle(q: np.ndarray) -> np.ndarray:
    """Geodesic angle of a rotation, in ``[0, pi]``."""
    q = quat_normalize(q)
    w = np.abs(q[..., 0])
    # atan2 form is better conditioned than arccos near zero
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), w)


def _so3_coeffs(theta: np.ndarray):
    """(1 - cos t)/t^2 and (t - sin t)/t^3 with Taylor fallbacks."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    return a, b


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """``Exp(phi + d) ≈ Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _so3_coeffs(theta)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 12.0 + theta**2 / 720.0, (1.0 - t * np.sin(t) / (2.0 * (1.0 - np.cos(t)))) / t**2)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + c[..., None, None] * (K @ K)


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Twist ``[rho, phi]`` to ``(q, p)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    q = so3_exp(phi)
    p = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return q, p


def se3_log(q: np.ndarray, p: np.ndarray, check: bool = True) -> np.ndarray:
    """``(q, p)`` to twist ``[rho, phi]``."""
    phi = so3_log(q, check=check)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), np.asarray(p, dtype=float))
    return np.concatenate([rho, phi], axis=-1)


def se3_adjoint(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """6x6 adjoint for ``[rho, phi]`` ordering."""
    R = quat_to_rotmat(q)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = skew(p) @ R
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``T_AB``; ``q`` and ``p`` may carry leading batch axes."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(IDENTITY_QUAT.copy(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(rotmat_to_quat(T[..., :3, :3]), T[..., :3, 3])

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        return cls(*se3_exp(xi))

    def log(self, check: bool = True) -> np.ndarray:
        return se3_log(self.q, self.p, check=check)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        out = np.zeros(self.q.shape[:-1] + (4, 4))
        out[..., :3, :3] = self.R
        out[..., :3, 3] = self.p
        out[..., 3, 3] = 1.0
        return out

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(qi, -quat_rotate(qi, self.p))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), quat_rotate(self.q, other.p) + self.p)

    def act(self, x: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, x) + self.p

    def __len__(self) -> int:
        return self.q.shape[0]

    def __getitem__(self, idx) -> "Pose":
        return Pose(self.q[idx], self.p[idx])


def pose_interpolate(a: Pose, b: Pose, s) -> Pose:
    """Constant-twist (screw) interpolation ``a exp(s log(a^-1 b))``."""
    s = np.asarray(s, dtype=float)
    xi = (a.inverse() @ b).log(check=False)
    return a @ Pose.exp(s[..., None] * xi)


def rollpitch_to_quat(roll, pitch) -> np.ndarray:
    """``R = Rx(roll) Ry(pitch)`` (yaw fixed to zero)."""
    qx = so3_exp(np.stack([roll, np.zeros_like(roll), np.zeros_like(roll)], axis=-1))
    qy = so3_exp(np.stack([np.zeros_like(pitch), pitch, np.zeros_like(pitch)], axis=-1))
    return quat_mul(qx, qy)
