"""Exception hierarchy. The CLI maps each category to its own exit code."""


class CnnGpError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CnnGpError, ValueError):
    """Invalid architecture, hyperparameters or configuration file."""


class DataError(CnnGpError, ValueError):
    """Malformed or inconsistent input data (IDX files, Gram files, labels)."""


class NumericError(CnnGpError, ArithmeticError):
    """A numerical procedure failed, e.g. the jitter ladder was exhausted."""
