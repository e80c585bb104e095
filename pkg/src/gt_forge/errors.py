"""Exception types raised across the toolkit.

Every error carries an optional ``hint`` with a remediation suggestion; the
CLI prints it on the machine-readable error line.
"""


class GTForgeError(Exception):
    """Base class for all toolkit errors."""

    hint = ""

    def __init__(self, message: str, hint: str | None = None):
        super().__init__(message)
        if hint is not None:
            self.hint = hint


# geometry
class AngleNearPi(GTForgeError):
    hint = "rotation is too close to 180 deg for a unique logarithm"


# preintegration
class InsufficientCoverage(GTForgeError):
    hint = "the IMU stream must span the requested interval"


class BiasDeltaTooLarge(GTForgeError):
    hint = "re-preintegrate with the new bias instead of applying a first-order correction"


# spline
class TooFewSamples(GTForgeError):
    hint = "at least 4 MoCap samples are required"


class GapTooLarge(GTForgeError):
    hint = "MoCap stream has a dropout longer than 3 nominal periods; split the sequence"


class OutOfDomain(GTForgeError):
    hint = "query time lies outside the valid spline domain"


class RelativeRotationNearPi(GTForgeError):
    hint = "consecutive MoCap poses rotate by ~180 deg; data too sparse or corrupted"


# initializer
class DegenerateAxes(GTForgeError):
    hint = "excite rotation about at least two different axes"


class NoMotion(DegenerateAxes):
    hint = "rotate the device during recording so angular-speed signals can be correlated"


class OffsetAtSearchBoundary(GTForgeError):
    hint = "increase max_offset_search or check the clocks"


class IllConditioned(GTForgeError):
    hint = "linear initialization is ill-conditioned; add translational and rotational excitation"


class ConsensusFailure(GTForgeError):
    hint = "too many outliers; check the MoCap marker tracking"


# estimator
class EmptyOverlap(GTForgeError):
    hint = "IMU and MoCap streams do not overlap in time after offset alignment"


class OutOfSplineDomain(OutOfDomain):
    pass


class NumericalFailure(GTForgeError):
    hint = "non-finite cost or step; check input data for NaNs"


class NotConverged(GTForgeError):
    hint = "increase max_iterations"


# metrics
class NoOverlap(GTForgeError):
    hint = "trajectories share no common time span"


class DegenerateGeometry(UserWarning):
    """Alignment is not fully observable (collinear positions)."""


# io
class ParseError(GTForgeError):
    hint = "check the file against the documented column layout"

    def __init__(self, message: str, path=None, line: int | None = None, hint: str | None = None):
        loc = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(loc + message, hint)
        self.path = path
        self.line = line


class NonMonotoneTime(ParseError):
    hint = "timestamps must be strictly increasing; remove duplicates"
