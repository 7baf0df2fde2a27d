"""Exception types shared across the package."""


class HybridRegError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(HybridRegError):
    pass


class EmptyCloud(HybridRegError):
    pass


class KTooLarge(HybridRegError):
    pass


class ShapeMismatch(HybridRegError):
    pass


class NonFinite(HybridRegError):
    pass


class RootNotScalar(HybridRegError):
    pass


class EmptyPatch(HybridRegError):
    pass


class TooFewPoints(HybridRegError):
    pass


class NotNormalized(HybridRegError):
    pass


class ZeroRowOrColumn(HybridRegError):
    pass


class NonPositiveVariance(HybridRegError):
    pass


class DivergedLoss(HybridRegError):
    pass


class TooFewCorrespondences(HybridRegError):
    pass


class NoValidModel(HybridRegError):
    pass


class NoUsablePatch(HybridRegError):
    pass


class NoValidPose(HybridRegError):
    pass


class NoQualifyingPair(HybridRegError):
    pass


class EmptyOverlap(HybridRegError):
    pass


class QuotaUnreachable(HybridRegError):
    pass


class EmptyCorrespondences(HybridRegError):
    pass


class EmptyBatch(HybridRegError):
    pass


class InvalidRotation(HybridRegError):
    pass


class FormatError(HybridRegError):
    """Malformed input file."""


class ZeroProbabilityEntry(HybridRegError):
    pass
