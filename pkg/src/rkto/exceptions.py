"""Exception types raised across the package."""


class RKTOError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RKTOError, ValueError):
    """An argument violates an operation's precondition."""


class NonFiniteError(InvalidInputError):
    """A numeric input contained NaN or infinity."""


class DimensionError(RKTOError, ValueError):
    """Shapes, supports or lengths do not agree."""


class CapacityError(RKTOError, RuntimeError):
    """A request exceeds an enumeration or population budget."""


class DecodeError(RKTOError, ValueError):
    """A trace does not carry a well-formed mask block."""


class ParseError(RKTOError, ValueError):
    """A serialized record could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(RKTOError, ValueError):
    """A file was written by an incompatible format version."""


class ConsistencyError(RKTOError, ValueError):
    """Files that must agree with each other do not."""


class ConfigError(RKTOError, ValueError):
    """A configuration file is malformed or names an unknown key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DivergenceError(RKTOError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
