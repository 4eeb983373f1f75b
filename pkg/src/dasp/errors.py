class DaspError(Exception):
    pass


class ShapeError(DaspError, ValueError):
    """Input array does not have the shape a network or model expects."""


class NumericFault(DaspError, FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


class ConfigError(DaspError, ValueError):
    pass


class DomainError(DaspError, ValueError):
    """Argument outside the mathematical domain (non-positive std, degenerate data)."""
