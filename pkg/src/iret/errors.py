"""Exception hierarchy. Every error carries a short machine-readable code."""


class IretError(Exception):
    code = "error"


class UsageError(IretError):
    code = "usage"


class DataError(IretError):
    code = "data"


class ShapeError(DataError, ValueError):
    code = "shape"


class DegenerateVectorError(DataError, ValueError):
    """Raised when a zero vector would have to be normalized."""

    code = "zero_vector"


class FormatError(DataError):
    code = "format"


class GroundTruthError(DataError):
    code = "ground_truth"
