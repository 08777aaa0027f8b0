"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so new error types should
subclass one of the four roots below.
"""


class DRFuserError(Exception):
    """Base class for all package errors."""


class DimensionError(DRFuserError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DRFuserError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DegenerateBatchError(ContractError):
    pass


class DomainError(ContractError):
    pass


class ConfigError(DRFuserError, ValueError):
    """A configuration field is invalid; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(DRFuserError):
    """Input data is malformed (bad coordinates, unreadable files)."""


class IntegrityError(DataError):
    """On-disk artifacts disagree with their manifest or header."""


class NumericHealthError(DRFuserError, ArithmeticError):
    """A NaN or Inf appeared in a loss, gradient or parameter."""
