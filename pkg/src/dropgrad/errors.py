"""Exception hierarchy. Each family maps to one CLI exit code."""


class DropGradError(Exception):
    exit_code = 1


class ConfigError(DropGradError, ValueError):
    exit_code = 2


class ShapeError(DropGradError, ValueError):
    exit_code = 2


class NumericError(DropGradError, ArithmeticError):
    exit_code = 3


class NonFiniteError(NumericError):
    """A NaN or Inf reached a place that requires finite values."""


class DegenerateError(NumericError):
    """An estimator was asked to project onto a zero-norm (or collinear) reference."""


class CacheError(NumericError):
    """Missing, consumed, or corrupt layer cache."""


class GradCheckError(NumericError):
    """A gradient audit exceeded its tolerance."""


class DataFormatError(DropGradError, OSError):
    exit_code = 4


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass
