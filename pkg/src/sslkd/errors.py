"""Exception hierarchy shared by every module.

CLI exit codes are derived from the base class an error inherits from:
:class:`DataError` maps to 3 and :class:`NumericError` to 4.
"""


class SSLKDError(Exception):
    """Base class for all library errors."""


class DataError(SSLKDError):
    """Input data is unusable (too short, too few samples, bad file)."""


class NumericError(SSLKDError, ArithmeticError):
    """A computation produced NaN/Inf or hit a degenerate configuration."""


class ShapeError(SSLKDError, ValueError):
    """Tensor dimensions do not agree."""


class ContractError(SSLKDError, ValueError):
    """A precondition of an operation was violated by the caller."""


class InputTooShortError(DataError, ValueError):
    pass


class AlignmentError(DataError, ValueError):
    pass


class InsufficientDataError(DataError, ValueError):
    pass


class FormatError(DataError, ValueError):
    """A binary artifact has a bad magic number or truncated payload."""


class DegenerateVectorError(NumericError, ValueError):
    pass
