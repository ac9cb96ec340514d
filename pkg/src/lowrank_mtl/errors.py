"""Exception hierarchy shared by every module."""


class LowRankMTLError(Exception):
    pass


class DimensionError(LowRankMTLError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LowRankMTLError, ValueError):
    """A configuration or hyperparameter violates its invariants."""


class DataError(LowRankMTLError, ValueError):
    """A dataset file or in-memory dataset is malformed."""


class NumericError(LowRankMTLError, ArithmeticError):
    """Non-convergence or a non-finite value in a numeric routine."""
