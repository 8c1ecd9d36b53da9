class ConvForgeError(Exception):
    """Base class for errors raised by convforge."""


class DataError(ConvForgeError, ValueError):
    """Input data or arguments failed validation."""


class GenerationError(ConvForgeError, RuntimeError):
    """A generation stage produced nothing usable."""
