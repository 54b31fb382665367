"""CST-YOLO: a CPU-scale blood-cell detector with a from-scratch autodiff core."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
