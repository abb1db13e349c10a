"""Typed exceptions raised across the toolkit.

Every error carries a short machine-greppable code used by the CLI
(`error[<CODE>]: message`).
"""


class MbaError(Exception):
    """Base class; `code` is the stable machine-readable identifier."""

    code = "GENERIC"

    def __init__(self, message=""):
        super().__init__(message or self.__class__.__name__)


class DegenerateRotationSeed(MbaError):
    code = "DEGENERATE_ROTATION_SEED"


class EmptyResidualSet(MbaError):
    code = "EMPTY_RESIDUAL_SET"


class NoValidSamples(MbaError):
    code = "NO_VALID_SAMPLES"

    def __init__(self, frame_i, frame_j):
        self.frame_i = frame_i
        self.frame_j = frame_j
        super().__init__(f"no eligible correspondences for pair ({frame_i}, {frame_j})")


class InsufficientCalibrationPoints(MbaError):
    code = "INSUFFICIENT_CALIBRATION_POINTS"


class DegenerateConfiguration(MbaError):
    code = "DEGENERATE_CONFIGURATION"


class TwoViewFailure(MbaError):
    code = "TWO_VIEW_FAILURE"


class ScaleResolutionFailure(MbaError):
    code = "SCALE_RESOLUTION_FAILURE"


class RegistrationFailure(MbaError):
    code = "REGISTRATION_FAILURE"


class NoValidHypothesis(MbaError):
    code = "NO_VALID_HYPOTHESIS"


class AllSubgraphsEmpty(MbaError):
    code = "ALL_SUBGRAPHS_EMPTY"


class QueryUnreachable(MbaError):
    code = "QUERY_UNREACHABLE"

    def __init__(self, frame_id):
        self.frame_id = frame_id
        super().__init__(f"query frame {frame_id} has no map edge above the covisibility threshold")


class IoNotFound(MbaError):
    code = "IO_NOT_FOUND"


class InsufficientFrames(MbaError):
    code = "INSUFFICIENT_FRAMES"


class DegenerateTrajectory(MbaError):
    code = "DEGENERATE_TRAJECTORY"


class ConfigInfeasible(MbaError):
    code = "CONFIG_INFEASIBLE"


class BadMagic(MbaError):
    code = "BAD_MAGIC"


class TruncatedFile(MbaError):
    code = "TRUNCATED_FILE"


class DimensionOverflow(MbaError):
    code = "DIMENSION_OVERFLOW"


class ConfidenceOutOfRange(MbaError):
    code = "CONFIDENCE_OUT_OF_RANGE"
