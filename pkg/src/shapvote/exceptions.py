"""Exception types raised across the package."""


class ShapvoteError(Exception):
    """Base class for all package errors."""


class DomainError(ShapvoteError, ValueError):
    """An argument lies outside the domain of the operation."""


class CapacityError(ShapvoteError, ValueError):
    """The request exceeds an enumeration or size guard."""


class DimensionError(ShapvoteError, ValueError):
    """Array shapes do not agree."""


class SingularityError(ShapvoteError, ArithmeticError):
    """A linear system could not be solved."""


class UnderdeterminedError(ShapvoteError, ValueError):
    """Too few distinct observations to identify the solution."""


class NumericError(ShapvoteError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class FormatError(ShapvoteError, ValueError):
    """A binary file has a bad magic, checksum or layout."""


class LengthError(FormatError):
    """A binary file ended before its declared contents."""


class UsageError(ShapvoteError, RuntimeError):
    """An object was used out of its valid sequence (e.g. a stale cache)."""
