from types import SimpleNamespace

import numpy as np
import pytest

from gt_forge import geometry as geo
from gt_forge import io
from gt_forge.errors import NonMonotoneTime, ParseError
from gt_forge.metrics import MetricReport, Trajectory
from gt_forge.simulator import SimConfig, simulate

from conftest import random_quat

IMU_ROWS = """t,ax,ay,az,wx,wy,wz
0.000,0.1,0.2,9.81,0.01,0.02,0.03
0.002,0.1,0.2,9.81,0.01,0.02,0.03
0.004,0.1,0.2,9.81,0.01,0.02,0.03
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestImuCsv:
    def test_three_rows(self, tmp_path):
        imu = io.read_imu_csv(write(tmp_path, "imu.csv", IMU_ROWS))
        assert len(imu.t) == 3
        np.testing.assert_allclose(imu.accel[1], [0.1, 0.2, 9.81])
        np.testing.assert_allclose(imu.gyro[2], [0.01, 0.02, 0.03])

    def test_comments_and_blank_lines(self, tmp_path):
        text = "# recorded on bench\n\n" + IMU_ROWS.replace("0.002,", "# dropped\n0.002,")
        assert len(io.read_imu_csv(write(tmp_path, "imu.csv", text)).t) == 3

    def test_duplicate_timestamp(self, tmp_path):
        text = IMU_ROWS.replace("0.004,", "0.002,")
        with pytest.raises(NonMonotoneTime) as exc:
            io.read_imu_csv(write(tmp_path, "imu.csv", text))
        assert exc.value.line == 4
        assert "imu.csv:4" in str(exc.value)

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError, match="header"):
            io.read_imu_csv(write(tmp_path, "imu.csv", IMU_ROWS.replace("wz", "gz")))

    @pytest.mark.parametrize("bad", ["0.006,1,2,3,4,5", "0.006,1,2,3,4,5,x", "0.006,1,2,3,4,5,nan"])
    def test_malformed_row_reports_line(self, tmp_path, bad):
        with pytest.raises(ParseError) as exc:
            io.read_imu_csv(write(tmp_path, "imu.csv", IMU_ROWS + bad + "\n"))
        assert exc.value.line == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="cannot open"):
            io.read_imu_csv(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path):
        s = simulate(SimConfig(duration=1.0, rng_seed=3))
        io.write_imu_csv(tmp_path / "imu.csv", s.imu)
        back = io.read_imu_csv(tmp_path / "imu.csv")
        np.testing.assert_allclose(back.accel, s.imu.accel, atol=1e-9)
        np.testing.assert_allclose(back.t, s.imu.t, atol=1e-9)


class TestMocapCsv:
    HEADER = "t,px,py,pz,qx,qy,qz,qw\n"

    def test_non_unit_quaternion_rejected(self, tmp_path):
        text = self.HEADER + "0.00,1,2,3,0,0,0,1\n0.01,1,2,3,0,0,0,0.9\n0.02,1,2,3,0,0,0.6,0.8\n"
        res = io.read_mocap_csv(write(tmp_path, "m.csv", text))
        assert res.n_rejected == 1 and res.rejected_lines == (3,)
        assert len(res.data.tau) == 2

    def test_scalar_last_on_disk(self, tmp_path):
        text = self.HEADER + "0.00,1,2,3,0,0,0.6,0.8\n"
        res = io.read_mocap_csv(write(tmp_path, "m.csv", text))
        np.testing.assert_allclose(res.data.q[0], [0.8, 0.0, 0.0, 0.6])

    def test_near_unit_renormalized(self, tmp_path):
        text = self.HEADER + "0.00,1,2,3,0,0,0,1.0005\n"
        q = io.read_mocap_csv(write(tmp_path, "m.csv", text)).data.q[0]
        assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-15)

    def test_round_trip(self, tmp_path):
        s = simulate(SimConfig(duration=1.0, rng_seed=3))
        io.write_mocap_csv(tmp_path / "m.csv", s.mocap)
        back = io.read_mocap_csv(tmp_path / "m.csv").data
        np.testing.assert_allclose(back.p, s.mocap.p, atol=1e-9)
        assert np.max(geo.rotation_angle(geo.quat_mul(geo.quat_conj(back.q), s.mocap.q))) < 1e-8


class TestTum:
    def test_round_trip(self, tmp_path, rng):
        n = 50
        tr = Trajectory(np.cumsum(rng.uniform(0.001, 0.1, n)), geo.Pose(random_quat(rng, n), rng.normal(size=(n, 3))))
        io.write_tum(tmp_path / "a.tum", tr)
        back = io.read_tum(tmp_path / "a.tum")
        np.testing.assert_allclose(back.t, tr.t, atol=1e-9)
        np.testing.assert_allclose(back.poses.p, tr.poses.p, atol=1e-9)
        assert np.max(geo.rotation_angle(geo.quat_mul(geo.quat_conj(back.poses.q), tr.poses.q))) < 1e-8

    def test_empty(self, tmp_path):
        p = write(tmp_path, "e.tum", "")
        assert len(io.read_tum(p)) == 0

    def test_write_empty(self, tmp_path):
        tr = Trajectory(np.zeros(0), geo.Pose(np.zeros((0, 4)), np.zeros((0, 3))))
        io.write_tum(tmp_path / "e.tum", tr)
        assert (tmp_path / "e.tum").read_text() == ""

    def test_comments(self, tmp_path):
        p = write(tmp_path, "c.tum", "# timestamp tx ty tz qx qy qz qw\n1.0 0 0 0 0 0 0 1\n\n# end\n2.0 1 0 0 0 0 0 1\n")
        tr = io.read_tum(p)
        np.testing.assert_array_equal(tr.t, [1.0, 2.0])
        np.testing.assert_array_equal(tr.poses.q[0], geo.IDENTITY_QUAT)

    def test_wrong_field_count(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            io.read_tum(write(tmp_path, "b.tum", "1.0 0 0 0 0 0 0 1\n2.0 0 0 0 0 0 1\n"))
        assert exc.value.line == 2

    def test_deterministic_bytes(self, tmp_path, rng):
        n = 10
        tr = Trajectory(np.arange(n) * 0.01, geo.Pose(random_quat(rng, n), rng.normal(size=(n, 3))))
        io.write_tum(tmp_path / "a.tum", tr)
        io.write_tum(tmp_path / "b.tum", tr)
        assert (tmp_path / "a.tum").read_bytes() == (tmp_path / "b.tum").read_bytes()
        assert "-0.000000000" not in (tmp_path / "a.tum").read_text()


class TestReports:
    def test_truth_meta_round_trip(self, tmp_path):
        s = simulate(SimConfig(duration=2.0, rng_seed=1))
        io.write_truth_meta(tmp_path / "m.csv", s.truth)
        meta = io.read_truth_meta(tmp_path / "m.csv")
        np.testing.assert_allclose(meta["q_MI_wxyz"], s.truth.extrinsics.q, atol=1e-9)
        np.testing.assert_allclose(meta["p_MI"], s.truth.extrinsics.p, atol=1e-9)
        assert meta["offset0"] == pytest.approx(0.4237, abs=1e-12)
        assert meta["gravity_roll"] == pytest.approx(0.03, abs=1e-9)
        np.testing.assert_allclose(meta["t_MI"], s.truth.offset(s.truth.t), atol=1e-9)
        np.testing.assert_allclose(meta["bgz"], s.truth.bias_g[:, 2], atol=1e-9)

    def test_calib_report_round_trip(self, tmp_path):
        ext = SimpleNamespace(q_MI=geo.so3_exp([0.1, -0.2, 0.3]), p_MI=np.array([0.05, -0.03, 0.08]),
                              n_offsets=2, offset_t=np.array([0.0, 30.0]), offset=np.array([0.42, 0.421]))
        states = SimpleNamespace(extrinsics=ext, gravity=SimpleNamespace(roll=0.03, pitch=-0.02))
        report = SimpleNamespace(rms_imu=0.9, rms_mocap=1.1, rms_bias=0.2, n_mocap_factors=5900,
                                 n_degenerate_windows=1, degenerate_windows=[(30.43, 35.43)], iterations=7,
                                 converged=True, reason="relative cost decrease below tolerance", costs=[10.0, 2.5])
        io.write_calib_report(tmp_path / "c.csv", tmp_path / "c.txt", states, report)
        back = io.read_calib_report(tmp_path / "c.csv")
        np.testing.assert_allclose([back[f"q_MI_{c}"] for c in "wxyz"], ext.q_MI, atol=1e-9)
        assert back["offset_knot_1_value"] == pytest.approx(0.421)
        assert back["degenerate_window_0_end"] == pytest.approx(35.43)
        assert back["termination"] == report.reason
        assert back["converged"] == 1.0 and back["final_cost"] == 2.5
        text = (tmp_path / "c.txt").read_text()
        assert "30.430, 35.430" in text and "NOT converged" not in text

    def test_metrics_csv(self, tmp_path):
        rep = MetricReport(1e-3, np.deg2rad(0.1), 2e-4, np.deg2rad(0.01), 500, geo.Pose.identity())
        io.write_metrics_csv(tmp_path / "m.csv", rep, "run0")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "label,ate_rmse_m,are_rmse_deg,rte_rmse_m,rre_rmse_deg,n_associated"
        assert lines[1] == "run0,0.001000000,0.100000000,0.000200000,0.010000000,500"
        assert "ATE" in io.format_metrics_table(rep)
