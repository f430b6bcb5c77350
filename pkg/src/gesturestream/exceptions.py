"""Exception hierarchy shared by every module of the package."""


class GestureStreamError(Exception):
    """Base class for all package errors."""


class ConfigError(GestureStreamError, ValueError):
    pass


class MissingReferenceError(GestureStreamError, ValueError):
    """Spatial-configuration partitioning was requested without a reference frame."""


class DegenerateSkeletonError(GestureStreamError, ValueError):
    pass


class ShapeError(GestureStreamError, ValueError):
    pass


class NumericError(GestureStreamError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class StateError(GestureStreamError, RuntimeError):
    pass


class LabelError(GestureStreamError, ValueError):
    pass


class DataError(GestureStreamError, ValueError):
    pass


class ParseError(GestureStreamError, ValueError):
    """Malformed input file. ``location`` names the offending line or field."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class InputError(GestureStreamError, ValueError):
    pass
