"""CSV / TUM readers and writers plus the calibration and truth reports.

On disk quaternions are scalar-last ``(qx, qy, qz, qw)`` (TUM convention); in
memory they are scalar-first ``(w, x, y, z)``. All floats are written with
nine decimals so files are byte-reproducible and round-trip to 1e-9.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import NonMonotoneTime, ParseError
from .metrics import Trajectory
from .preintegration import ImuData
from .spline import MocapData

IMU_HEADER = ("t", "ax", "ay", "az", "wx", "wy", "wz")
MOCAP_HEADER = ("t", "px", "py", "pz", "qx", "qy", "qz", "qw")
QUAT_NORM_TOL = 1e-3
FMT = "%.9f"


def _fmt(x: float) -> str:
    s = FMT % x
    return "0.000000000" if s == "-0.000000000" else s


def _to_disk(q: np.ndarray) -> np.ndarray:
    return np.asarray(q)[..., [1, 2, 3, 0]]


def _from_disk(q: np.ndarray) -> np.ndarray:
    return np.asarray(q)[..., [3, 0, 1, 2]]


# ---------------------------------------------------------------- parsing helpers


def _data_rows(path: Path, header: tuple[str, ...]):
    """Yield ``(line_number, floats)`` for each data row after checking the header."""
    try:
        f = open(path, newline="")
    except OSError as e:
        raise ParseError(f"cannot open file: {e.strerror}", path, 0, hint="check the path and permissions") from e
    with f:
        seen_header = False
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            cells = [c.strip() for c in row]
            if not seen_header:
                if tuple(cells) != header:
                    raise ParseError(f"expected header {','.join(header)!r}, got {','.join(cells)!r}", path, lineno)
                seen_header = True
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(cells)}", path, lineno)
            try:
                vals = [float(c) for c in cells]
            except ValueError as e:
                raise ParseError(f"non-numeric value ({e})", path, lineno) from e
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite value", path, lineno, hint="remove NaN/inf rows")
            yield lineno, vals
        if not seen_header:
            raise ParseError(f"missing header {','.join(header)!r}", path, 1)


def _check_monotone(t: list[float], lines: list[int], path: Path) -> None:
    for k in range(1, len(t)):
        if not t[k] > t[k - 1]:
            raise NonMonotoneTime(f"timestamp {t[k]!r} does not increase past {t[k - 1]!r} (t = {t[k]:.9f} s)",
                                  path, lines[k])


# ---------------------------------------------------------------- IMU / MoCap CSV


def read_imu_csv(path) -> ImuData:
    """Read ``t,ax,ay,az,wx,wy,wz`` (s, m/s^2, rad/s)."""
    path = Path(path)
    lines, rows = [], []
    for lineno, vals in _data_rows(path, IMU_HEADER):
        lines.append(lineno)
        rows.append(vals)
    a = np.asarray(rows, dtype=float).reshape(-1, 7)
    _check_monotone(list(a[:, 0]), lines, path)
    return ImuData(a[:, 0], a[:, 1:4], a[:, 4:7])


@dataclass(frozen=True)
class MocapReadResult:
    data: MocapData
    rejected_lines: tuple[int, ...]  # rows dropped for a non-unit quaternion

    @property
    def n_rejected(self) -> int:
        return len(self.rejected_lines)


def read_mocap_csv(path) -> MocapReadResult:
    """Read ``t,px,py,pz,qx,qy,qz,qw``; quaternions within 1e-3 of unit norm are renormalized, others rejected."""
    path = Path(path)
    lines, rows, rejected = [], [], []
    for lineno, vals in _data_rows(path, MOCAP_HEADER):
        if abs(np.linalg.norm(vals[4:8]) - 1.0) > QUAT_NORM_TOL:
            rejected.append(lineno)
            continue
        lines.append(lineno)
        rows.append(vals)
    a = np.asarray(rows, dtype=float).reshape(-1, 8)
    _check_monotone(list(a[:, 0]), lines, path)
    q = geo.quat_normalize(_from_disk(a[:, 4:8])) if len(a) else np.zeros((0, 4))
    return MocapReadResult(MocapData(a[:, 0], q, a[:, 1:4]), tuple(rejected))


def _write_rows(path, header, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(_fmt(v) for v in r) + "\n")


def write_imu_csv(path, imu: ImuData) -> None:
    _write_rows(path, IMU_HEADER, np.column_stack([imu.t, imu.accel, imu.gyro]))


def write_mocap_csv(path, mocap: MocapData) -> None:
    _write_rows(path, MOCAP_HEADER, np.column_stack([mocap.tau, mocap.p, _to_disk(mocap.q)]))


# ---------------------------------------------------------------- TUM


def write_tum(path, traj: Trajectory) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    with open(path, "w") as f:
        if len(traj) == 0:
            return
        rows = np.column_stack([traj.t, traj.poses.p, _to_disk(geo.quat_canonical(traj.poses.q))])
        for r in rows:
            f.write(" ".join(_fmt(v) for v in r) + "\n")


def read_tum(path) -> Trajectory:
    path = Path(path)
    t, lines, rows = [], [], []
    try:
        f = open(path)
    except OSError as e:
        raise ParseError(f"cannot open file: {e.strerror}", path, 0, hint="check the path and permissions") from e
    with f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields 'timestamp tx ty tz qx qy qz qw', got {len(parts)}", path, lineno)
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise ParseError(f"non-numeric value ({e})", path, lineno) from e
            if abs(np.linalg.norm(vals[4:8]) - 1.0) > QUAT_NORM_TOL:
                raise ParseError("quaternion is not unit norm", path, lineno, hint="check the quaternion column order (qx qy qz qw)")
            t.append(vals[0])
            lines.append(lineno)
            rows.append(vals)
    _check_monotone(t, lines, path)
    a = np.asarray(rows, dtype=float).reshape(-1, 8)
    q = geo.quat_normalize(_from_disk(a[:, 4:8])) if len(a) else np.zeros((0, 4))
    return Trajectory(a[:, 0], geo.Pose(q, a[:, 1:4]))


# ---------------------------------------------------------------- reports


def _kv_lines(items) -> list[str]:
    out = []
    for k, v in items:
        out.append(f"{k},{_fmt(v) if isinstance(v, float) else v}")
    return out


def write_truth_meta(path, truth) -> None:
    """Calibration constants as ``# key=value`` comments, then per-sample offset and biases."""
    e = truth.extrinsics
    roll, pitch = _rollpitch(truth.gravity)
    head = [
        f"# q_MI_wxyz={' '.join(_fmt(v) for v in e.q)}",
        f"# p_MI={' '.join(_fmt(v) for v in e.p)}",
        f"# offset0={_fmt(truth.offset0)}",
        f"# clock_drift_s_per_min={_fmt(truth.clock_drift)}",
        f"# gravity_roll={_fmt(roll)}",
        f"# gravity_pitch={_fmt(pitch)}",
    ]
    rows = np.column_stack([truth.t, truth.offset(truth.t), truth.bias_a, truth.bias_g])
    with open(path, "w", newline="") as f:
        f.write("\n".join(head) + "\n")
        f.write("t,t_MI,bax,bay,baz,bgx,bgy,bgz\n")
        for r in rows:
            f.write(",".join(_fmt(v) for v in r) + "\n")


def read_truth_meta(path) -> dict:
    """Inverse of :func:`write_truth_meta`: constants plus column arrays."""
    meta: dict = {}
    cols = None
    rows = []
    with open(path) as f:
        for line in f:
            s = line.strip()
            if s.startswith("#"):
                k, _, v = s[1:].strip().partition("=")
                vals = [float(x) for x in v.split()]
                meta[k] = np.array(vals) if len(vals) > 1 else vals[0]
            elif cols is None and s:
                cols = s.split(",")
            elif s:
                rows.append([float(x) for x in s.split(",")])
    a = np.asarray(rows).reshape(-1, len(cols or []))
    for k, name in enumerate(cols or []):
        meta[name] = a[:, k]
    return meta


def _rollpitch(g):
    from .initializer import gravity_to_rollpitch

    return gravity_to_rollpitch(g)


def calib_report_rows(states, report) -> list[tuple[str, object]]:
    """Flat ``(key, value)`` rows describing the estimated calibration and solver outcome."""
    e = states.extrinsics
    q = geo.quat_canonical(e.q_MI)
    rows: list[tuple[str, object]] = []
    rows += [(f"q_MI_{c}", float(v)) for c, v in zip("wxyz", q)]
    rows += [(f"p_MI_{c}", float(v)) for c, v in zip("xyz", e.p_MI)]
    rows.append(("n_offset_knots", e.n_offsets))
    for k, (tk, ok) in enumerate(zip(e.offset_t, e.offset)):
        rows.append((f"offset_knot_{k}_t", float(tk)))
        rows.append((f"offset_knot_{k}_value", float(ok)))
    rows.append(("gravity_roll", float(states.gravity.roll)))
    rows.append(("gravity_pitch", float(states.gravity.pitch)))
    rows.append(("rms_imu", float(report.rms_imu)))
    rows.append(("rms_mocap", float(report.rms_mocap)))
    rows.append(("rms_bias", float(report.rms_bias)))
    rows.append(("n_mocap_factors", report.n_mocap_factors))
    rows.append(("n_degenerate_windows", report.n_degenerate_windows))
    for k, (a, b) in enumerate(report.degenerate_windows):
        rows.append((f"degenerate_window_{k}_start", float(a)))
        rows.append((f"degenerate_window_{k}_end", float(b)))
    rows.append(("iterations", report.iterations))
    rows.append(("converged", int(report.converged)))
    rows.append(("termination", report.reason))
    rows.append(("final_cost", float(report.costs[-1])))
    return rows


def write_calib_report(csv_path, txt_path, states, report) -> None:
    rows = calib_report_rows(states, report)
    with open(csv_path, "w", newline="") as f:
        f.write("key,value\n")
        f.write("\n".join(_kv_lines(rows)) + "\n")
    if txt_path is None:
        return
    e = states.extrinsics
    rv = geo.so3_log(geo.quat_canonical(e.q_MI))
    lines = [
        "Calibration report",
        "",
        f"  q_MI (w x y z)      : {' '.join(f'{v:+.9f}' for v in geo.quat_canonical(e.q_MI))}",
        f"  q_MI rotation vector: {' '.join(f'{v:+.6f}' for v in rv)} rad",
        f"  p_MI                : {' '.join(f'{v:+.6f}' for v in e.p_MI)} m",
        f"  gravity roll/pitch  : {np.degrees(states.gravity.roll):+.6f} / {np.degrees(states.gravity.pitch):+.6f} deg",
        "  time offset knots   :",
    ]
    lines += [f"    t = {tk:12.6f} s  t_MI = {ok:+.9f} s" for tk, ok in zip(e.offset_t, e.offset)]
    lines += [
        f"  residual RMS        : imu {report.rms_imu:.4f}  mocap {report.rms_mocap:.4f}  bias {report.rms_bias:.4f}",
        f"  MoCap factors       : {report.n_mocap_factors}",
        f"  degenerate windows  : {report.n_degenerate_windows}",
    ]
    lines += [f"    [{a:.3f}, {b:.3f}] s" for a, b in report.degenerate_windows]
    lines.append(f"  solver              : {report.iterations} iterations, {report.reason}"
                 + ("" if report.converged else " (NOT converged)"))
    Path(txt_path).write_text("\n".join(lines) + "\n")


def read_calib_report(path) -> dict:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            v = row["value"]
            try:
                out[row["key"]] = float(v)
            except ValueError:
                out[row["key"]] = v
    return out


def write_metrics_csv(path, report, label: str = "") -> None:
    row = report.as_row()
    with open(path, "w", newline="") as f:
        f.write("label," + ",".join(row) + "\n")
        f.write(label + "," + ",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row.values()) + "\n")


def format_metrics_table(report) -> str:
    return "\n".join([
        f"{'metric':<8}{'value':>14}  unit",
        f"{'ATE':<8}{report.ate_rmse:>14.6e}  m",
        f"{'ARE':<8}{np.degrees(report.are_rmse):>14.6e}  deg",
        f"{'RTE':<8}{report.rte_rmse:>14.6e}  m",
        f"{'RRE':<8}{np.degrees(report.rre_rmse):>14.6e}  deg",
        f"{'pairs':<8}{report.n_associated:>14d}",
    ])


__all__ = [
    "IMU_HEADER",
    "MOCAP_HEADER",
    "MocapReadResult",
    "read_imu_csv",
    "read_mocap_csv",
    "write_imu_csv",
    "write_mocap_csv",
    "write_tum",
    "read_tum",
    "write_truth_meta",
    "read_truth_meta",
    "calib_report_rows",
    "write_calib_report",
    "read_calib_report",
    "write_metrics_csv",
    "format_metrics_table",
]
