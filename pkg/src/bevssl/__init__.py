"""Self-supervised BEV map segmentation from camera-view labels via differentiable rendering."""
from .errors import ConfigError, EmptyMask, InvalidSpec, LabelIsolationError, ShapeMismatch

__version__ = "0.1.0"

__all__ = ["ConfigError", "EmptyMask", "InvalidSpec", "LabelIsolationError", "ShapeMismatch", "__version__"]
