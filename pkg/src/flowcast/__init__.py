"""Cascaded flow-matching nowcasting on synthetic radar fields."""

__version__ = "0.1.0"

from . import kernels  # noqa: F401  (selects the conv backend at import)
from .tensor import Tensor, ParamStore, grad_eval, no_grad  # noqa: F401
