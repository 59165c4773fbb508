"""Exception hierarchy shared by every stage of the pipeline."""


class SelfGaitError(Exception):
    """Base class for all errors raised by this package."""


# data
class EmptySilhouette(SelfGaitError, ValueError):
    pass


class InsufficientIdentities(SelfGaitError, ValueError):
    pass


class SequenceTooShort(SelfGaitError, ValueError):
    pass


class NotEnoughData(SelfGaitError, ValueError):
    pass


# model
class ShapeMismatch(SelfGaitError, ValueError):
    pass


class IndivisibleHeight(ShapeMismatch):
    pass


class SequenceTooShortForWindow(ShapeMismatch):
    pass


# training
class NumericFailure(SelfGaitError, ArithmeticError):
    pass


class DegenerateNorm(NumericFailure):
    pass


class NonFiniteLoss(NumericFailure):
    pass


class DegenerateBatch(SelfGaitError, ValueError):
    pass


# checkpoints
class CheckpointError(SelfGaitError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


# evaluation / configuration
class EvaluationError(SelfGaitError, ValueError):
    pass


class ConfigError(SelfGaitError, ValueError):
    pass
