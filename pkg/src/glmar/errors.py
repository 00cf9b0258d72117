"""Exception types shared across the package."""


class GlmarError(Exception):
    """Base class for all package errors."""


class DataError(GlmarError):
    """Malformed, inconsistent, or non-finite input data."""


class NumericalError(GlmarError):
    """A numerical operation failed (factorization, non-SPD update, ...)."""
