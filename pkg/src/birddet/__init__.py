"""Attention, Retinex enhancement, anchor mining and evaluation for small-object detection."""
from ._accel import HAVE_NUMBA, backend

__version__ = "0.1.0"
__all__ = ["HAVE_NUMBA", "backend", "__version__"]
