"""Ground-truth trajectories from motion capture and an IMU.

Fuses MoCap poses with inertial measurements in a batch factor graph,
jointly estimating the MoCap-to-IMU extrinsics, a drifting clock offset and
gravity alignment, and ships a simulator and trajectory metrics to verify it.
"""

from . import geometry
from .errors import GTForgeError
from .estimator import EstimatorConfig, estimate, extract_trajectory
from .initializer import InitConfig, ransac_initialize
from .metrics import Trajectory, evaluate
from .simulator import SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "geometry",
    "GTForgeError",
    "EstimatorConfig",
    "estimate",
    "extract_trajectory",
    "InitConfig",
    "ransac_initialize",
    "Trajectory",
    "evaluate",
    "SimConfig",
    "simulate",
]
