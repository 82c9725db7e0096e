"""Interactive multi-instance matting toolkit.

Promptable instance localization with cross-round conflict reasoning, dual
branch matte refinement, a deterministic simulated-user evaluation protocol,
matting metrics, synthetic data tooling, and an HTTP session service.
"""

from .core import AlphaMatte, Image, InstanceMask, InstanceRecord, binarize, composite

__all__ = [
    "AlphaMatte",
    "Image",
    "InstanceMask",
    "InstanceRecord",
    "binarize",
    "composite",
]

__version__ = "0.1.0"
