"""Exception hierarchy shared across the package."""


class FmeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FmeError, ValueError):
    """Inconsistent or invalid configuration."""


class DomainError(FmeError, ValueError):
    """Evaluation point outside the basis domain."""


class RankError(FmeError, ValueError):
    """Least-squares projection is underdetermined or rank deficient."""


class OperatorError(FmeError, ValueError):
    """A derivative operator could not be built (singular block, bad orders)."""


class NumericInputError(FmeError, ValueError):
    """Non-finite numeric input."""


class DataError(FmeError, ValueError):
    """Malformed dataset file or dataset contents."""


class DegenerateComponentError(FmeError, RuntimeError):
    """An expert lost all of its responsibility mass during EM."""
