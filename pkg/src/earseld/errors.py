"""Exception hierarchy shared across the package."""


class EarError(Exception):
    """Base class for all package errors."""


class ConfigError(EarError):
    pass


class GeometryError(EarError):
    pass


class PolyphonyError(EarError):
    pass


class MissingIRError(EarError, KeyError):
    pass


class InputTooShort(EarError, ValueError):
    pass


class MissingStats(EarError):
    pass


class ShapeError(EarError, ValueError):
    pass


class LengthMismatch(EarError, ValueError):
    pass


class PoolExhausted(EarError):
    pass


class DivergenceError(EarError, FloatingPointError):
    pass
