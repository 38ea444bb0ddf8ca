"""Shared exception types.

Every failure mode the library can raise maps onto one of these so the CLI
can translate them into stable exit codes (contract/config -> 1, numeric -> 2).
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class InsufficientQueueError(RuntimeError):
    """The support set holds fewer entries than the requested neighbour count."""


class MetricUnavailableError(RuntimeError):
    """A metric was requested but the required side information is missing."""


class ConfigError(ValueError):
    """A configuration document is malformed or contains unknown keys."""
