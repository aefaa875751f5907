"""Exception types shared across the package."""


class BayesGridError(Exception):
    """Base class for package errors."""


class ShapeError(BayesGridError, ValueError):
    """Array extents do not fit the operation."""


class NonFiniteError(BayesGridError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class DataError(BayesGridError, ValueError):
    """Malformed input file or dataset."""
