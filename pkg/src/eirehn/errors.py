"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes: usage problems exit 1, data problems
exit 2 and numerical failures exit 3.
"""


class EirehnError(Exception):
    """Base class for all library errors."""


class ShapeError(EirehnError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EirehnError, ValueError):
    """A value lies outside the domain of an operation (e.g. log of 0)."""


class ContractError(EirehnError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(EirehnError, ValueError):
    """Invalid configuration or command-line flags."""


class DataError(EirehnError):
    """Missing, malformed or inconsistent input data."""


class NumericalError(EirehnError, ArithmeticError):
    """A non-finite value appeared during computation.

    ``where`` carries whatever location information the raiser had (a
    parameter name and index, a ``(t, r)`` pair, an epoch/batch pair).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
