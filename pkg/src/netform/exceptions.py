"""Exception hierarchy shared by all modules.

The CLI maps each class to a distinct exit code.
"""


class NetformError(Exception):
    """Base class for all package errors."""


class ValidationError(NetformError, ValueError):
    """Malformed input or a violated design invariant."""


class NumericalError(NetformError, ArithmeticError):
    """A linear system that should be solvable turned out singular."""


class CapExceededError(NetformError):
    """Exhaustive enumeration requested above the configured group-size cap."""
