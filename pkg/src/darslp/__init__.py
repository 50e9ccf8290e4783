"""Region-disentangled pose autoencoder and non-autoregressive text-to-pose generator."""
from .errors import DarslpError, ValidationError
from .skeleton import DEFAULT_LAYOUT, REGIONS, SkeletonLayout

__version__ = "0.1.0"

__all__ = ["DarslpError", "ValidationError", "DEFAULT_LAYOUT", "REGIONS", "SkeletonLayout", "__version__"]
