"""Exception types raised across the package.

Every failure mode that callers are expected to handle gets its own class so
that CLI exit codes and tests can dispatch on type rather than message text.
"""


class AdadetectError(Exception):
    """Base class for all package-specific errors."""


# numerics
class NotPositiveDefinite(AdadetectError):
    """Cholesky pivot <= 0; the matrix is not positive definite."""


class EmptyInput(AdadetectError):
    pass


class DimensionMismatch(AdadetectError):
    pass


# datasets
class BadMagic(AdadetectError):
    pass


class TruncatedStream(AdadetectError):
    pass


class DimensionOverflow(AdadetectError):
    pass


class BadRecordLength(AdadetectError):
    pass


class LabelOutOfRange(AdadetectError):
    pass


class ShapeMismatch(AdadetectError):
    pass


class NoPerturbation(AdadetectError):
    pass


class InvalidStats(AdadetectError):
    pass


# dnn
class UnknownTap(AdadetectError):
    pass


class EmptyDataset(AdadetectError):
    pass


class DeadLayer(AdadetectError):
    pass


class NotFollowedByParametricLayer(AdadetectError):
    pass


# null models
class TooFewSamples(AdadetectError):
    pass


class DegenerateComponent(AdadetectError):
    pass


class NegativeInput(AdadetectError):
    pass


class ClassUnderpopulated(AdadetectError):
    pass


# detectors
class MissingModel(AdadetectError):
    pass


class LengthMismatch(AdadetectError):
    pass


class NoHistograms(AdadetectError):
    pass


# attacks
class NotCorrectlyClassified(AdadetectError):
    pass


class InitiallyDetected(AdadetectError):
    pass


# evaluation
class EmptyList(AdadetectError):
    pass


class Unachievable(AdadetectError):
    pass


class AllDetected(AdadetectError):
    pass


# cli
class ConfigInvalid(AdadetectError):
    pass


class MissingArtifact(AdadetectError):
    pass


class UnreadableArtifact(AdadetectError):
    pass
