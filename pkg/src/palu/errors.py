"""Exception hierarchy shared by all palu modules.

The CLI maps these onto exit codes: ValidationError -> 1,
NumericalError -> 2, GoldenMismatchError -> 3.
"""


class PaluError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PaluError):
    """Bad shapes, bad configuration, or violated preconditions."""


class NumericalError(PaluError):
    """Non-convergence, non-finite values, or loss of positive definiteness."""


class GoldenMismatchError(PaluError):
    """A computed report disagrees with an embedded golden table."""
