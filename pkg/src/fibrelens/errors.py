"""Exception hierarchy shared by the library and the command line."""


class DimensionError(ValueError):
    """Array shapes or image sizes do not agree."""


class FormatError(Exception):
    """A binary file could not be decoded."""


class CorruptHeaderError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnknownVersionError(FormatError):
    pass


class UndefinedMetricError(ArithmeticError):
    """Metric has a zero denominator, e.g. PCC of a constant image."""


class NumericError(ArithmeticError):
    """Training produced non-finite values."""
