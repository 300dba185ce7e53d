"""Swin-windowed attention with group rational KAN feed-forward layers,
a U-shaped segmentation model around them, and the training / complexity /
data-efficiency tooling to exercise every mechanism."""

__version__ = "0.1.0"

from .kernels import BACKEND
from .tensor import Tape, Tensor, backward

__all__ = ["BACKEND", "Tape", "Tensor", "backward", "__version__"]
