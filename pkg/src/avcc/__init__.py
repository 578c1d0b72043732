"""Audio-visual crowd counting with a from-scratch reverse-mode tape."""

from .config import Config, GEOMETRIES
from .tensor import Tape, Tensor

__all__ = ["Config", "GEOMETRIES", "Tape", "Tensor"]
__version__ = "0.1.0"
