"""Exception hierarchy shared across the toolkit.

``ValidationError`` subclasses map to CLI exit code 2, everything else
derived from ``NieError`` maps to exit code 3.
"""


class NieError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(NieError):
    """Bad user input: malformed files, invalid parameters, unknown names."""


class DatasetError(ValidationError):
    """A dataset directory or one of its files is malformed."""


class ShapeError(ValidationError):
    """Operands with incompatible shapes."""


class TapeError(NieError):
    """Misuse of a gradient tape (non-scalar backward, consumed tape)."""


class DivergenceError(NieError):
    """An optimization produced non-finite values."""


class UndefinedCorrelationError(NieError):
    """Pearson/Spearman requested on a vector with zero variance or < 3 points."""
