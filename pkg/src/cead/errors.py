"""Exception hierarchy.

Validation problems (bad input, malformed files) derive from
:class:`ValidationError`; failures of a numerical procedure derive from
:class:`NumericalError`.  The CLI maps the two families to distinct exit
codes.
"""


class CeadError(Exception):
    """Base class for all package errors."""


class ValidationError(CeadError, ValueError):
    """Input violates a documented precondition or invariant."""


class NumericalError(CeadError, ArithmeticError):
    """A numerical routine failed (rank deficiency, non-convergence, ...)."""


class VolumeFormatError(ValidationError):
    """Malformed CEAD binary file."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class NonFiniteDataError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


class InvariantError(ValidationError):
    """A data object does not satisfy its invariants."""


class RankDeficientError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
