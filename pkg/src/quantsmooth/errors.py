"""Exception types shared across the package."""


class QuantSmoothError(Exception):
    """Base class for all package errors."""


class DimensionError(QuantSmoothError, ValueError):
    """Shapes are incompatible or an index is out of range."""


class UnsupportedDimensionError(DimensionError):
    """A transform was requested for a size it cannot handle (e.g. non power of two)."""


class NumericError(QuantSmoothError, ArithmeticError):
    """Non-finite values, zero variance/norm, or an accumulator that would overflow."""


class DegeneratePoolError(QuantSmoothError, ValueError):
    """A sample pool is too small or otherwise unusable for the requested statistic."""


class FormatError(QuantSmoothError, ValueError):
    """A binary or JSON artifact does not match the expected layout."""
