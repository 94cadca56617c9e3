"""Exception types raised across the package."""


class QttDmzError(Exception):
    """Base class for all package errors."""


class DomainError(QttDmzError, ValueError):
    """Input outside the domain of an operation (bad shape, sign, size)."""


class NumericalError(QttDmzError, ArithmeticError):
    """A numerical kernel failed (SVD non-convergence, overflow, non-finite output)."""


class ResourceError(QttDmzError):
    """A configured size cap would be exceeded."""


class RankOverflowError(ResourceError):
    """Truncation at the requested tolerance needs more rank than ``max_rank``."""


class DegenerateStateError(NumericalError):
    """Density has zero (or nonpositive) mass and cannot be normalized."""


class DivergenceError(NumericalError):
    """A filter produced non-finite or out-of-range output."""


class StabilityError(QttDmzError):
    """Mesh conditions fail and the caller did not allow unstable runs."""


class ConfigError(QttDmzError, ValueError):
    """Invalid or inconsistent experiment configuration."""
