"""Exception hierarchy shared across the package."""


class PuYunError(Exception):
    """Base class for all package errors."""


class ShapeError(PuYunError, ValueError):
    pass


class ConfigError(PuYunError, ValueError):
    pass


class NumericError(PuYunError, FloatingPointError):
    pass


class UsageError(PuYunError, ValueError):
    pass


class DataError(PuYunError, ValueError):
    """Malformed files, out-of-range time indices, insufficient horizons."""


class UndefinedACCError(PuYunError, ArithmeticError):
    """Anomaly field has zero norm so the correlation is undefined."""
