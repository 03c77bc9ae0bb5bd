"""Exception types.

Each class carries a short ``category`` string used by the CLI to print a
machine-parsable first line on failure.
"""


class MotionPrimError(Exception):
    category = "error"


class DegenerateInput(MotionPrimError, ValueError):
    category = "degenerate_input"


class InvalidRotation(MotionPrimError, ValueError):
    category = "invalid_rotation"


class EmptyInput(MotionPrimError, ValueError):
    category = "empty_input"


class ZeroWeightSum(MotionPrimError, ValueError):
    category = "zero_weight_sum"


class LengthMismatch(MotionPrimError, ValueError):
    category = "length_mismatch"


class UnnormalizedInput(MotionPrimError, ValueError):
    category = "unnormalized_input"


class SourceTooShort(MotionPrimError, ValueError):
    category = "source_too_short"


class NonFiniteLoss(MotionPrimError, FloatingPointError):
    category = "non_finite_loss"

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class NonFiniteObjective(NonFiniteLoss):
    category = "non_finite_objective"


class EmptyCloud(MotionPrimError, ValueError):
    category = "empty_cloud"


class UntrainedInitEncoder(MotionPrimError, RuntimeError):
    category = "untrained_init_encoder"


class ResolutionTooHigh(MotionPrimError, ValueError):
    category = "resolution_too_high"


class ParseError(MotionPrimError, ValueError):
    category = "parse_error"


class SchemaVersionMismatch(MotionPrimError, ValueError):
    category = "schema_version_mismatch"


class InsufficientDiversity(MotionPrimError, ValueError):
    category = "insufficient_diversity"
