"""Exception types raised across rirkit."""


class RirError(Exception):
    """Base class for all library errors."""


class ShapeError(RirError, ValueError):
    pass


class ConfigError(RirError, ValueError):
    pass


class InputError(RirError, ValueError):
    pass


class FormatError(RirError, ValueError):
    """A file on disk does not match the expected binary layout."""


class CorruptDataError(FormatError):
    pass


class NumericalError(RirError, FloatingPointError):
    """Raised when NaN or Inf shows up in gradients or losses."""


class UnsupportedModelError(RirError, ValueError):
    pass
