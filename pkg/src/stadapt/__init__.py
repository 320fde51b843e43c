"""Space-time adaptive finite elements for coupled flow and transport."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
