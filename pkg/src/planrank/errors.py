"""Exception hierarchy shared across the package."""


class PlanRankError(Exception):
    """Base class for all package errors."""


class DataError(PlanRankError):
    """Bad input data: malformed documents, inconsistent measurements."""


class MalformedDocument(DataError):
    pass


class StructuralError(DataError):
    pass


class EmptyRuns(DataError):
    pass


class NonFiniteLatency(DataError):
    pass


class LengthMismatch(DataError):
    pass


class InvalidConfig(DataError):
    pass


class TooFewQueries(DataError):
    pass


class TooFewExamples(DataError):
    pass


class EmptySet(DataError):
    pass


class MissingQuery(DataError):
    pass


class InvalidRanks(DataError):
    pass


class NonFiniteScores(DataError):
    pass


class ShapeMismatch(PlanRankError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class ListTooLong(DataError):
    pass


class NonFiniteValue(PlanRankError, FloatingPointError):
    pass


class NonDeterministicFunction(PlanRankError):
    pass


class ModelError(PlanRankError):
    """Problems with persisted models: versions, checksums, degraded state."""


class VersionMismatch(ModelError):
    pass


class CorruptFile(ModelError):
    pass


class DivergedLoss(ModelError):
    pass


class DegradedDetector(ModelError):
    pass


class KOutOfRange(DataError):
    pass
