"""Boundary/region-guided camouflaged object detection on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
from .tensor import Tensor, backward, no_grad  # noqa: F401
