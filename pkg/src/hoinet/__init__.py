"""Higher-order object interaction networks for video understanding.

A self-contained numpy autodiff engine, attention and recurrent interaction
modules, an action-recognition head, a caption decoder, an analytic FLOP cost
model, binary feature IO, and training utilities.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .tensor import Graph, Tensor, backward, grad_check  # noqa: F401
