"""Run configuration: INI files whose keys mirror the CLI flags.

Each subcommand reads the section of the same name, e.g.::

    [estimate]
    state_rate = 100
    knot_spacing = 30
    mask_degenerate = true

Precedence (lowest to highest): built-in defaults, config file, the
``GT_FORGE_SEED`` environment variable (seed only), command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .estimator import EstimatorConfig
from .initializer import InitConfig
from .preintegration import ImuNoiseParams

SEED_ENV = "GT_FORGE_SEED"


class ConfigError(ParseError):
    hint = "every config key must match a flag of the subcommand (dashes may be written as underscores)"


def _key_line(path: Path, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].split(":", 1)[0].strip().replace("-", "_") == key:
            return lineno
    return None


def apply_config_file(parser: argparse.ArgumentParser, path, section: str) -> None:
    """Install the values of ``[section]`` as parser defaults (so explicit flags still win)."""
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", path, 0, hint="check the --config path") from e
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e.message.splitlines()[0]}", path, getattr(e, "lineno", 0) or 0) from e
    if not cp.has_section(section):
        return
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    values = {}
    for raw_key in cp[section]:
        key = raw_key.replace("-", "_")
        line = _key_line(path, section, key) or 0
        if key not in actions:
            raise ConfigError(f"unknown key {raw_key!r} in [{section}]", path, line)
        act = actions[key]
        try:
            if isinstance(act, argparse.BooleanOptionalAction) or act.nargs == 0:
                val = cp[section].getboolean(raw_key)
            elif act.type is not None:
                val = act.type(cp[section][raw_key])
            else:
                val = cp[section][raw_key]
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise ConfigError(f"bad value for {raw_key!r}: {e}", path, line) from e
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"{raw_key!r} must be one of {sorted(act.choices)}", path, line)
        values[key] = val
    parser.set_defaults(**values)


def seed_from_env(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer", SEED_ENV, 0, hint="unset it or give an integer") from e


@dataclass(frozen=True)
class RunConfig:
    """Everything ``estimate`` needs, validated."""

    imu_path: Path
    mocap_path: Path
    out_dir: Path
    state_rate: float = 100.0
    output_rate: float | None = None
    knot_spacing: float = 30.0
    constant_offset: bool = False
    degeneracy_window: float = 5.0
    degeneracy_angle_deg: float = 10.0
    mask_degenerate: bool = True
    kernel_mu: float = 5.0
    huber_delta: float = 3.0
    accel_noise: float = 5.2e-3
    gyro_noise: float = 2.1e-4
    accel_walk: float = 1e-3
    gyro_walk: float = 1.3e-5
    mocap_trans_noise: float = 4.3e-5
    mocap_rot_noise: float = 1.7e-4
    max_iterations: int = 50
    seed: int = 0
    time_offset: float | None = None
    strict: bool = False

    def validate(self) -> None:
        for p in (self.imu_path, self.mocap_path):
            if not Path(p).is_file():
                raise ConfigError(f"input file not found: {p}", p, 0, hint="pass --imu/--mocap with existing CSV files")
        positive = {
            "state_rate": self.state_rate, "knot_spacing": self.knot_spacing, "degeneracy_window": self.degeneracy_window,
            "kernel_mu": self.kernel_mu, "huber_delta": self.huber_delta, "accel_noise": self.accel_noise,
            "gyro_noise": self.gyro_noise, "accel_walk": self.accel_walk, "gyro_walk": self.gyro_walk,
            "mocap_trans_noise": self.mocap_trans_noise, "mocap_rot_noise": self.mocap_rot_noise,
        }
        for k, v in positive.items():
            if not (np.isfinite(v) and v > 0.0):
                raise ConfigError(f"{k} must be positive, got {v}", "config", 0, hint=f"set --{k.replace('_', '-')} > 0")
        if not 0.0 <= self.degeneracy_angle_deg < 180.0:
            raise ConfigError("degeneracy angle must lie in [0, 180) deg", "config", 0)
        if self.output_rate is not None and not self.output_rate > 0.0:
            raise ConfigError("output_rate must be positive", "config", 0)
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1", "config", 0)

    @property
    def imu_noise(self) -> ImuNoiseParams:
        return ImuNoiseParams(self.accel_noise, self.accel_walk, self.gyro_noise, self.gyro_walk)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            state_rate=self.state_rate,
            offset_knot_spacing=self.knot_spacing,
            constant_offset=self.constant_offset,
            degeneracy_window=self.degeneracy_window,
            degeneracy_angle=np.radians(self.degeneracy_angle_deg),
            mask_degenerate=self.mask_degenerate,
            imu_noise=self.imu_noise,
            mocap_trans_noise_density=self.mocap_trans_noise,
            mocap_rot_noise_density=self.mocap_rot_noise,
            huber_delta=self.huber_delta,
            max_iterations=self.max_iterations,
            strict=self.strict,
        )

    def init_config(self) -> InitConfig:
        return InitConfig(mu=self.kernel_mu, seed=self.seed, time_offset=self.time_offset)


__all__ = ["ConfigError", "RunConfig", "SEED_ENV", "apply_config_file", "seed_from_env"]
