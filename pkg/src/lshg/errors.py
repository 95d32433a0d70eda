"""Exception hierarchy shared across the package."""


class LshgError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LshgError, ValueError):
    pass


class GeometryError(LshgError, ValueError):
    """Spatial dimensions incompatible with the requested operation."""


class StatisticsError(LshgError, ValueError):
    pass


class NumericError(LshgError, ArithmeticError):
    """A NaN or Inf appeared where finite values were required."""


class ConfigError(LshgError, ValueError):
    pass


class ConsistencyError(LshgError, AssertionError):
    """Two independent computations of the same quantity disagree."""


class CompatibilityError(LshgError, ValueError):
    pass


class FormatError(LshgError, ValueError):
    pass


class ParseError(LshgError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(LshgError, ValueError):
    pass
