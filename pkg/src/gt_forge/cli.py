"""``gt-forge`` command line: simulate | estimate | evaluate | check-jacobians."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import io
from .config import RunConfig, apply_config_file, seed_from_env
from .errors import GTForgeError
from .estimator import estimate, extract_trajectory
from .jacobian_check import check_all
from .metrics import evaluate
from .simulator import SimConfig, simulate

EXIT_ERROR = 2
EXIT_CHECK_FAILED = 1


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="write a synthetic IMU + MoCap dataset with ground truth")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--duration", type=float, default=60.0, help="seconds")
    p.add_argument("--imu-rate", type=float, default=500.0)
    p.add_argument("--mocap-rate", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-scale", type=float, default=1.0, help="scales every noise density")
    p.add_argument("--imu-noise-scale", type=float, default=1.0, help="extra factor on IMU noise")
    p.add_argument("--mocap-noise-scale", type=float, default=1.0, help="extra factor on MoCap noise")
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--clock-drift", type=float, default=2e-3, help="clock drift, s per minute")
    p.add_argument("--offset", type=float, default=0.4237, help="MoCap minus IMU clock offset at t = 0, s")
    p.add_argument("--motion-period", type=float, default=None, help="alternate motion and stillness with this period")
    p.add_argument("--motion-fraction", type=float, default=1.0)
    p.add_argument("--pure-translation", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--trajectory", choices=("sinusoid", "screw"), default="sinusoid")
    p.add_argument("--trajectory-file", type=str, default=None, help="TUM file to replay instead of a synthetic path")
    return p


def _add_estimate(sub):
    p = sub.add_parser("estimate", help="estimate the ground-truth trajectory and calibration")
    d = RunConfig(Path(), Path(), Path())
    p.add_argument("--imu", type=Path, default=Path("imu.csv"))
    p.add_argument("--mocap", type=Path, default=Path("mocap.csv"))
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--state-rate", type=float, default=d.state_rate, help="Hz")
    p.add_argument("--output-rate", type=float, default=None, help="Hz of gt.tum (default: state rate)")
    p.add_argument("--knot-spacing", type=float, default=d.knot_spacing, help="time-offset knot spacing, s")
    p.add_argument("--constant-offset", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--degeneracy-window", type=float, default=d.degeneracy_window, help="s")
    p.add_argument("--degeneracy-angle", type=float, default=d.degeneracy_angle_deg, help="deg")
    p.add_argument("--mask-degenerate", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--kernel-mu", type=float, default=d.kernel_mu)
    p.add_argument("--huber-delta", type=float, default=d.huber_delta)
    p.add_argument("--accel-noise", type=float, default=d.accel_noise)
    p.add_argument("--gyro-noise", type=float, default=d.gyro_noise)
    p.add_argument("--accel-walk", type=float, default=d.accel_walk)
    p.add_argument("--gyro-walk", type=float, default=d.gyro_walk)
    p.add_argument("--mocap-trans-noise", type=float, default=d.mocap_trans_noise)
    p.add_argument("--mocap-rot-noise", type=float, default=d.mocap_rot_noise)
    p.add_argument("--max-iterations", type=int, default=d.max_iterations)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--time-offset", type=float, default=None, help="known initial offset; skips correlation")
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=False,
                   help="fail instead of warning when the solver does not converge")
    return p


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="ATE/ARE/RTE/RRE between two TUM trajectories")
    p.add_argument("estimate_tum", type=Path)
    p.add_argument("reference_tum", type=Path)
    p.add_argument("--rate", type=float, default=50.0, help="evaluation grid, Hz")
    p.add_argument("--max-dt", type=float, default=0.02, help="association tolerance, s")
    p.add_argument("--align", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--delta", type=float, default=None, help="relative-error spacing, s (default one frame)")
    p.add_argument("--csv", type=Path, default=None, help="write the metrics row here")
    p.add_argument("--label", type=str, default="")
    return p


def _add_check(sub):
    p = sub.add_parser("check-jacobians", help="finite-difference check of every analytic Jacobian")
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="gt-forge", description=__doc__)
    parser.add_argument("--config", type=Path, default=None, help="INI file; sections named after subcommands")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {
        "simulate": _add_simulate(sub),
        "estimate": _add_estimate(sub),
        "evaluate": _add_evaluate(sub),
        "check-jacobians": _add_check(sub),
    }
    return parser, subs


def _parse(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    pre, _ = parser.parse_known_args(argv)
    seed_explicit = "--seed" in argv or any(a.startswith("--seed=") for a in argv)
    if pre.config is not None:
        apply_config_file(subs[pre.command], pre.config, pre.command)
    args = parser.parse_args(argv)
    if hasattr(args, "seed") and not seed_explicit:
        args.seed = seed_from_env(args.seed)
    return args


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = SimConfig(
        duration=args.duration, imu_rate=args.imu_rate, mocap_rate=args.mocap_rate, rng_seed=args.seed,
        noise_scale=args.noise_scale, imu_noise_scale=args.imu_noise_scale, mocap_noise_scale=args.mocap_noise_scale,
        outlier_fraction=args.outlier_fraction, clock_drift=args.clock_drift, true_offset0=args.offset,
        motion_period=args.motion_period, motion_fraction=args.motion_fraction,
        pure_translation=args.pure_translation, trajectory=args.trajectory, trajectory_file=args.trajectory_file,
    )
    out = simulate(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    io.write_imu_csv(args.out / "imu.csv", out.imu)
    io.write_mocap_csv(args.out / "mocap.csv", out.mocap)
    io.write_tum(args.out / "truth.tum", out.truth.trajectory())
    io.write_truth_meta(args.out / "truth_meta.csv", out.truth)
    print(f"simulated {cfg.duration:g} s: {len(out.imu)} IMU samples, {len(out.mocap)} MoCap poses "
          f"({int(out.outlier_mask.sum())} outliers) -> {args.out}")
    return 0


def run_config_from_args(args) -> RunConfig:
    return RunConfig(
        imu_path=args.imu, mocap_path=args.mocap, out_dir=args.out, state_rate=args.state_rate,
        output_rate=args.output_rate, knot_spacing=args.knot_spacing, constant_offset=args.constant_offset,
        degeneracy_window=args.degeneracy_window, degeneracy_angle_deg=args.degeneracy_angle,
        mask_degenerate=args.mask_degenerate, kernel_mu=args.kernel_mu, huber_delta=args.huber_delta,
        accel_noise=args.accel_noise, gyro_noise=args.gyro_noise, accel_walk=args.accel_walk, gyro_walk=args.gyro_walk,
        mocap_trans_noise=args.mocap_trans_noise, mocap_rot_noise=args.mocap_rot_noise,
        max_iterations=args.max_iterations, seed=args.seed, time_offset=args.time_offset, strict=args.strict,
    )


def cmd_estimate(args) -> int:
    rc = run_config_from_args(args)
    rc.validate()
    imu = io.read_imu_csv(rc.imu_path)
    mocap_read = io.read_mocap_csv(rc.mocap_path)
    if mocap_read.n_rejected:
        lines = ", ".join(str(x) for x in mocap_read.rejected_lines[:10])
        print(f"{rc.mocap_path}: rejected {mocap_read.n_rejected} rows with non-unit quaternions (lines {lines}"
              f"{', ...' if mocap_read.n_rejected > 10 else ''})", file=sys.stderr)
    res = estimate(imu, mocap_read.data, rc.init_config(), rc.estimator_config())
    rate = rc.output_rate or rc.state_rate
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    io.write_tum(rc.out_dir / "gt.tum", extract_trajectory(res.states, rate))
    io.write_calib_report(rc.out_dir / "calib_report.csv", rc.out_dir / "calib_report.txt", res.states, res.report)
    print((rc.out_dir / "calib_report.txt").read_text(), end="")
    return 0


def cmd_evaluate(args) -> int:
    est = io.read_tum(args.estimate_tum)
    ref = io.read_tum(args.reference_tum)
    rep = evaluate(est, ref, rate=args.rate, max_dt=args.max_dt, align=args.align, delta=args.delta)
    print(io.format_metrics_table(rep))
    if args.csv is not None:
        io.write_metrics_csv(args.csv, rep, args.label)
    return 0


def cmd_check_jacobians(args) -> int:
    results = check_all(args.configs, args.seed, args.tol)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  max rel err {r.max_rel_error:.3e}  "
              f"({r.n_configs} configs, tol {r.tol:g})")
    return 0 if all(r.passed for r in results) else EXIT_CHECK_FAILED


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "check-jacobians": cmd_check_jacobians,
}


def error_record(err: GTForgeError) -> dict:
    kinds = [c.__name__ for c in type(err).__mro__ if issubclass(c, GTForgeError) and c is not GTForgeError]
    return {"error": type(err).__name__, "kinds": kinds, "message": str(err), "hint": err.hint}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except GTForgeError as err:
        rec = error_record(err)
        print("gt-forge error: " + json.dumps(rec, sort_keys=True), file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as err:
        rec = {"error": type(err).__name__, "kinds": [], "message": str(err), "hint": "check the command-line values"}
        print("gt-forge error: " + json.dumps(rec, sort_keys=True), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
