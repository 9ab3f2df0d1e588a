"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration value or combination."""


class DimensionError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class EmptyInputError(ValueError):
    """An operation received an empty sequence or batch."""


class MaskError(ValueError):
    """A gating mask left no selectable entry."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""
