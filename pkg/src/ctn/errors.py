"""Exception types shared across the package."""


class CtnError(Exception):
    """Base class for package errors."""


class GeometryError(CtnError, ValueError):
    """Degenerate or inconsistent contour geometry."""


class DataError(CtnError, ValueError):
    """Bad dataset layout, file contents, or identifiers."""


class NumericError(CtnError, ArithmeticError):
    """Non-finite values or failed numerical procedures."""
