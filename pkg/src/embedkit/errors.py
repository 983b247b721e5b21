"""Exception types shared across the package."""


class EmbedKitError(Exception):
    """Base class for all embedkit errors."""


class ZeroVectorError(EmbedKitError, ValueError):
    """A vector with (near) zero L2 norm where a direction is required."""


class DimMismatchError(EmbedKitError, ValueError):
    """Operands have incompatible dimensions."""


class ShapeMismatchError(EmbedKitError, ValueError):
    """Adapter or weight shapes are incompatible."""


class EmptyInputError(EmbedKitError, ValueError):
    """An operation received an empty sequence."""


class EmptyTextError(EmbedKitError, ValueError):
    """Featurization of an empty string was requested."""


class TemperatureNonPositiveError(EmbedKitError, ValueError):
    """Softmax temperature must be strictly positive."""


class MissingTaskThetaError(EmbedKitError, KeyError):
    """No temperature parameter registered for the batch's task id."""


class WeightsInvalidError(EmbedKitError, ValueError):
    """Soup weights must be nonnegative and sum to one."""


class GenerationSpecError(EmbedKitError, ValueError):
    """Benchmark generation parameters are out of range."""


class NoClassificationDataError(EmbedKitError, ValueError):
    """Classification-dataset merge requested on a manifest without any."""


class ParseError(EmbedKitError, ValueError):
    """A manifest, checkpoint, or config file could not be parsed.

    ``line`` is the 1-based offending line for line-oriented formats,
    or None when the error is not positional.
    """

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicateIdError(EmbedKitError, ValueError):
    """Two records in one manifest share an id."""


class BatchInfeasibleError(EmbedKitError, ValueError):
    """The sampler cannot build a batch under the configured constraints."""


class NonFiniteLossError(EmbedKitError, ArithmeticError):
    """Training produced a NaN or infinite loss.

    ``step`` records the global step at which the loss diverged.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointVersionError(EmbedKitError, ValueError):
    """Checkpoint file format version is not supported by this reader."""


class EmptySplitError(EmbedKitError, ValueError):
    """Evaluation was requested on an empty manifest split."""
