"""Exception hierarchy shared by every module of the package."""


class PLNError(Exception):
    """Base class for all package errors."""


class DimensionError(PLNError, ValueError):
    """Matrices with incompatible shapes were combined."""


class InputError(PLNError, ValueError):
    """Malformed user input (files, counts, configuration)."""


class NumericalError(PLNError, ArithmeticError):
    """A computation produced a non-finite or otherwise invalid value."""


class NotPositiveDefiniteError(NumericalError):
    """A matrix required to be positive definite is not."""
