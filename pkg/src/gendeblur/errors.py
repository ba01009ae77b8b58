"""Exception hierarchy shared by all subpackages."""


class DeblurError(Exception):
    """Base class for every error raised by gendeblur."""


class ShapeError(DeblurError, ValueError):
    """Operand shapes do not conform."""


class NumericError(DeblurError, FloatingPointError):
    """A non-finite value (NaN or Inf) reached an operation that forbids it."""


class UsageError(DeblurError, RuntimeError):
    """An API was called in a state where it cannot do anything sensible."""


class ModelFormatError(DeblurError):
    """A model or dataset container is malformed, truncated or inconsistent."""


class SolverError(DeblurError):
    """Every restart of an optimisation failed."""


class ConfigError(DeblurError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
