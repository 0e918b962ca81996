"""Exception types raised across the package.

Each class maps onto one CLI exit code (see ``meme.cli``).
"""


class MemeError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ShapeError(MemeError, ValueError):
    """Tensor shapes do not agree with a distribution or modality spec."""

    exit_code = 2


class DomainError(MemeError, ValueError):
    """A parameter lies outside its admissible domain (e.g. scale <= 0)."""

    exit_code = 2


class ConfigError(MemeError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(MemeError, ValueError):
    """Malformed dataset: missing classes, empty observations, bad masks."""

    exit_code = 3


class NumericalError(MemeError, ArithmeticError):
    """A non-finite value appeared in an objective term.

    Parameters
    ----------
    term : str
        Name of the offending term, e.g. ``"log q(t|z)"``.
    """

    exit_code = 4

    def __init__(self, message, term=None, batch_index=None):
        super().__init__(message)
        self.term = term
        self.batch_index = batch_index
