"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(ValueError):
    """User-supplied data (volumes, labels, files) violates a precondition."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class CheckpointError(IOError):
    """A checkpoint file is malformed, corrupt, or mismatched."""
