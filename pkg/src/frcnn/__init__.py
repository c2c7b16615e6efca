"""Fast R-CNN detection-head library."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND"]
