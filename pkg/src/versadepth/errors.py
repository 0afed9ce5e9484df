"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes. The message names both shapes."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class DegenerateInputError(ValueError):
    """Input is formally valid but statistically unusable (e.g. constant depth)."""


class FormatError(ValueError):
    """A binary or text artifact does not match its documented layout."""


class ConfigError(ValueError):
    """An experiment or CLI configuration is malformed or inconsistent."""


class CameraLookupError(KeyError):
    """A camera id was requested that the model does not know."""


class DuplicateCameraError(ValueError):
    """A camera id was registered twice."""
