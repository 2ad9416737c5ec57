"""Dynamic ramping constraints from exact linearization, and scheduling with them."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
