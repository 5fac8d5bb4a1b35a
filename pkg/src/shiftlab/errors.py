"""Exception hierarchy shared across the package."""


class ShiftLabError(Exception):
    """Base class for all errors raised by shiftlab."""


class DimensionMismatch(ShiftLabError, ValueError):
    pass


class NotSpd(ShiftLabError, ValueError):
    """Cholesky factorization failed even after diagonal jitter."""


class Infeasible(ShiftLabError, ValueError):
    """Box and sum constraints of a QP admit no point."""


class MaxIterExceeded(ShiftLabError, RuntimeError):
    """Iteration budget exhausted; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class EmptySplit(ShiftLabError, RuntimeError):
    pass


class InvalidProjection(ShiftLabError, ValueError):
    pass


class InvalidK(ShiftLabError, ValueError):
    pass


class InsufficientSamples(ShiftLabError, ValueError):
    pass


class ParseError(ShiftLabError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonAscendingIndex(ParseError):
    pass


class RaggedRows(ParseError):
    pass


class NonNumericCell(ParseError):
    def __init__(self, message, line=None, column=None):
        if column is not None:
            message = f"{message} (column {column})"
        super().__init__(message, line)
        self.column = column


class TooFewPoints(ShiftLabError, ValueError):
    pass


class DegenerateData(ShiftLabError, ValueError):
    pass


class TaskMismatch(ShiftLabError, ValueError):
    pass


class UnsupportedLoss(ShiftLabError, ValueError):
    pass


class NonDifferentiable(ShiftLabError, ValueError):
    pass


class StaleCache(ShiftLabError, RuntimeError):
    """A forward cache was used after the network parameters changed."""


class RequiresOracle(ShiftLabError, ValueError):
    pass


class BadLayer(ShiftLabError, IndexError):
    pass


class NeedTwoDomains(ShiftLabError, ValueError):
    pass


class SingularMechanism(ShiftLabError, ValueError):
    pass


class LengthMismatch(ShiftLabError, ValueError):
    pass


class ConfigError(ShiftLabError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
