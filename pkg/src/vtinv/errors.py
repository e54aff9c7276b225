"""Exception types shared across the package.

``DataError`` and ``NumericError`` map to distinct CLI exit codes (2 and 3).
"""


class VTError(Exception):
    """Base class for all package errors."""


class DataError(VTError, ValueError):
    """Input data violates a precondition (bad file, wrong shape, bad label)."""


class DimensionError(DataError):
    pass


class NumericError(VTError, ArithmeticError):
    """Non-finite values or a failed numerical check."""


class DivergenceError(NumericError):
    pass
