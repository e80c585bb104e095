import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from gt_forge import geometry as geo
from gt_forge.errors import AngleNearPi

from conftest import quat_z, random_quat

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
quat_raw = arrays(np.float64, 4, elements=st.floats(-1.0, 1.0)).filter(lambda q: np.linalg.norm(q) > 0.1)


def scipy_quat(q):
    """scalar-first -> scipy Rotation"""
    return Rotation.from_quat(np.r_[q[1:], q[0]])


def same_rotation(a, b, tol=1e-12):
    return min(np.abs(a - b).max(), np.abs(a + b).max()) < tol


class TestQuaternionProduct:
    def test_identity_left(self, rng):
        q = random_quat(rng)
        np.testing.assert_allclose(geo.quat_mul(geo.IDENTITY_QUAT, q), q, atol=1e-15)

    def test_z90_twice_is_z180(self):
        q = geo.quat_mul(quat_z(np.pi / 2), quat_z(np.pi / 2))
        np.testing.assert_allclose(q, [0.0, 0.0, 0.0, 1.0], atol=1e-15)

    def test_matches_rotation_composition(self, rng):
        a, b = random_quat(rng, 50), random_quat(rng, 50)
        R = geo.quat_to_rotmat(geo.quat_mul(a, b))
        np.testing.assert_allclose(R, geo.quat_to_rotmat(a) @ geo.quat_to_rotmat(b), atol=1e-14)

    def test_agrees_with_scipy(self, rng):
        a, b = random_quat(rng), random_quat(rng)
        ref = (scipy_quat(a) * scipy_quat(b)).as_matrix()
        np.testing.assert_allclose(geo.quat_to_rotmat(geo.quat_mul(a, b)), ref, atol=1e-14)

    @given(quat_raw, quat_raw)
    def test_output_unit_norm(self, a, b):
        assert abs(np.linalg.norm(geo.quat_mul(a, b)) - 1.0) < 1e-12

    def test_broadcasts(self, rng):
        a = random_quat(rng, 7)
        b = random_quat(rng)
        out = geo.quat_mul(a, b)
        assert out.shape == (7, 4)
        np.testing.assert_allclose(out[3], geo.quat_mul(a[3], b))


class TestLeftRightMatrices:
    def test_identity(self):
        np.testing.assert_array_equal(geo.quat_left_matrix(geo.IDENTITY_QUAT), np.eye(4))
        np.testing.assert_array_equal(geo.quat_right_matrix(geo.IDENTITY_QUAT), np.eye(4))

    @given(quat_raw, quat_raw)
    def test_product_identities(self, a, b):
        a, b = geo.quat_normalize(a), geo.quat_normalize(b)
        ab = geo.quat_mul(a, b)
        np.testing.assert_allclose(geo.quat_left_matrix(a) @ b, ab, atol=1e-12)
        np.testing.assert_allclose(geo.quat_right_matrix(b) @ a, ab, atol=1e-12)

    def test_orthogonal(self, rng):
        q = random_quat(rng)
        for M in (geo.quat_left_matrix(q), geo.quat_right_matrix(q)):
            np.testing.assert_allclose(M.T @ M, np.eye(4), atol=1e-14)


class TestRotations:
    def test_rotmat_round_trip(self, rng):
        q = geo.quat_canonical(random_quat(rng, 200))
        np.testing.assert_allclose(geo.rotmat_to_quat(geo.quat_to_rotmat(q)), q, atol=1e-12)

    def test_rotate_matches_matrix(self, rng):
        q = random_quat(rng, 20)
        v = rng.normal(size=(20, 3))
        np.testing.assert_allclose(geo.quat_rotate(q, v), np.einsum("nij,nj->ni", geo.quat_to_rotmat(q), v), atol=1e-14)

    def test_passive_convention(self):
        # R_AB maps B-coordinates into A: a body x-axis yawed by 90 deg points along world y
        np.testing.assert_allclose(geo.quat_rotate(quat_z(np.pi / 2), [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)

    @given(vec3, vec3)
    def test_skew_is_cross(self, a, b):
        np.testing.assert_allclose(geo.skew(a) @ b, np.cross(a, b), atol=1e-12)


class TestSO3:
    def test_exp_zero(self):
        np.testing.assert_array_equal(geo.so3_exp(np.zeros(3)), geo.IDENTITY_QUAT)

    def test_exp_z90(self):
        h = np.sqrt(2.0) / 2.0
        np.testing.assert_allclose(geo.so3_exp([0.0, 0.0, np.pi / 2]), [h, 0.0, 0.0, h], atol=1e-15)

    def test_round_trip_1000(self, rng):
        axis = geo.quat_normalize(np.c_[np.zeros(1000), rng.normal(size=(1000, 3))])[:, 1:]
        phi = axis * rng.uniform(0.0, np.pi - 1e-3, (1000, 1))
        np.testing.assert_allclose(geo.so3_log(geo.so3_exp(phi)), phi, atol=1e-9)

    def test_log_exp_round_trip_1000(self, rng):
        q = geo.quat_canonical(random_quat(rng, 1000))
        q = q[geo.rotation_angle(q) < np.pi - 1e-3]
        np.testing.assert_allclose(geo.so3_exp(geo.so3_log(q)), q, atol=1e-12)

    @pytest.mark.parametrize("theta", [0.0, 1e-9, 1e-7, 1e-6, 1.0001e-6, 1e-4])
    def test_small_angle_branch_continuous(self, theta):
        phi = theta * np.array([0.6, -0.8, 0.0])
        np.testing.assert_allclose(geo.so3_log(geo.so3_exp(phi)), phi, atol=1e-15)

    def test_agrees_with_scipy(self, rng):
        phi = rng.normal(size=(50, 3))
        ref = Rotation.from_rotvec(phi).as_matrix()
        np.testing.assert_allclose(geo.quat_to_rotmat(geo.so3_exp(phi)), ref, atol=1e-13)

    def test_log_near_pi_raises(self):
        with pytest.raises(AngleNearPi):
            geo.so3_log(geo.so3_exp([0.0, 0.0, np.pi - 1e-8]))

    def test_log_near_pi_unchecked(self):
        phi = geo.so3_log(geo.so3_exp([0.0, 0.0, np.pi - 1e-8]), check=False)
        assert abs(np.linalg.norm(phi) - np.pi) < 1e-7

    def test_log_of_double_cover(self, rng):
        q = random_quat(rng)
        np.testing.assert_allclose(geo.so3_log(q, check=False), geo.so3_log(-q, check=False), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_right_jacobian(self, seed):
        rng = np.random.default_rng(seed)
        phi = rng.normal(size=3)
        d = 1e-7 * rng.normal(size=3)
        lhs = geo.so3_exp(phi + d)
        rhs = geo.quat_mul(geo.so3_exp(phi), geo.so3_exp(geo.so3_right_jacobian(phi) @ d))
        assert geo.rotation_angle(geo.quat_mul(geo.quat_conj(rhs), lhs)) < 1e-13

    def test_left_jacobian_inverse(self, rng):
        phi = rng.normal(size=(20, 3))
        np.testing.assert_allclose(geo.so3_left_jacobian(phi) @ geo.so3_left_jacobian_inv(phi),
                                   np.broadcast_to(np.eye(3), (20, 3, 3)), atol=1e-12)


class TestRotationAngle:
    @pytest.mark.parametrize("q, expected", [
        (geo.IDENTITY_QUAT, 0.0),
        (quat_z(np.pi / 2), np.pi / 2),
        (-quat_z(np.pi / 2), np.pi / 2),
        (quat_z(np.pi), np.pi),
    ])
    def test_values(self, q, expected):
        assert geo.rotation_angle(q) == pytest.approx(expected, abs=1e-15)

    def test_tiny_angle_accuracy(self):
        assert geo.rotation_angle(geo.so3_exp([1e-10, 0.0, 0.0])) == pytest.approx(1e-10, rel=1e-9)


class TestSE3:
    def test_exp_zero(self):
        T = geo.Pose.exp(np.zeros(6))
        np.testing.assert_array_equal(T.q, geo.IDENTITY_QUAT)
        np.testing.assert_array_equal(T.p, np.zeros(3))

    def test_pure_translation(self):
        T = geo.Pose.exp([1.0, -2.0, 0.5, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(T.q, geo.IDENTITY_QUAT)
        np.testing.assert_allclose(T.p, [1.0, -2.0, 0.5])

    def test_round_trip_1000(self, rng):
        xi = np.c_[rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3))]
        xi = xi[np.linalg.norm(xi[:, 3:], axis=1) < np.pi - 1e-3]
        np.testing.assert_allclose(geo.Pose.exp(xi).log(), xi, atol=1e-9)

    def test_matches_matrix_exponential(self, rng):
        from scipy.linalg import expm

        xi = rng.normal(size=6)
        X = np.zeros((4, 4))
        X[:3, :3] = geo.skew(xi[3:])
        X[:3, 3] = xi[:3]
        np.testing.assert_allclose(geo.Pose.exp(xi).matrix(), expm(X), atol=1e-12)

    def test_adjoint(self, rng):
        T = geo.Pose(random_quat(rng), rng.normal(size=3))
        xi = rng.normal(size=6) * 0.3
        lhs = T @ geo.Pose.exp(xi) @ T.inverse()
        rhs = geo.Pose.exp(geo.se3_adjoint(T.q, T.p) @ xi)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-12)

    def test_inverse_and_compose(self, rng):
        T = geo.Pose(random_quat(rng, 10), rng.normal(size=(10, 3)))
        I = T @ T.inverse()
        np.testing.assert_allclose(geo.rotation_angle(I.q), 0.0, atol=1e-7)
        np.testing.assert_allclose(I.p, 0.0, atol=1e-14)

    def test_act_matches_matrix(self, rng):
        T = geo.Pose(random_quat(rng), rng.normal(size=3))
        x = rng.normal(size=3)
        np.testing.assert_allclose(T.act(x), (T.matrix() @ np.r_[x, 1.0])[:3], atol=1e-14)

    def test_from_matrix(self, rng):
        T = geo.Pose(geo.quat_canonical(random_quat(rng)), rng.normal(size=3))
        U = geo.Pose.from_matrix(T.matrix())
        np.testing.assert_allclose(U.q, T.q, atol=1e-14)
        np.testing.assert_allclose(U.p, T.p)

    @pytest.mark.parametrize("s", [0.0, 0.25, 0.5, 1.0])
    def test_interpolate_on_screw(self, rng, s):
        a = geo.Pose(random_quat(rng), rng.normal(size=3))
        xi = rng.normal(size=6) * 0.5
        b = a @ geo.Pose.exp(xi)
        m = geo.pose_interpolate(a, b, s)
        ref = a @ geo.Pose.exp(s * xi)
        assert same_rotation(m.q, ref.q, 1e-12)
        np.testing.assert_allclose(m.p, ref.p, atol=1e-12)


def test_rollpitch_to_quat_order():
    r, p = 0.3, -0.2
    ref = Rotation.from_euler("XY", [r, p]).as_matrix()  # intrinsic: Rx @ Ry
    np.testing.assert_allclose(geo.quat_to_rotmat(geo.rollpitch_to_quat(r, p)), ref, atol=1e-14)
