"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Array shapes or extents do not line up."""


class EmptyMask(ValueError):
    """A loss was asked to average over zero pixels."""


class InvalidSpec(ValueError):
    """A generator or config specification is inconsistent."""


class ConfigError(ValueError):
    """A config file could not be parsed or validated."""


class LabelIsolationError(RuntimeError):
    """BEV ground truth was read while it was locked (pretraining)."""
