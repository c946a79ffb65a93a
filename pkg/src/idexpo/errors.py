"""Exception types shared across the package."""


class IdExpoError(Exception):
    """Base class for all package errors."""


class UsageError(IdExpoError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigurationError(IdExpoError):
    """Something required for evaluation was never set up (e.g. an unbound parameter)."""


class IngestionError(IdExpoError, ValueError):
    """A data file could not be turned into a valid dataset."""


class NumericalError(IdExpoError, ArithmeticError):
    """A numerical routine failed (singular system, non-finite loss, ...)."""
