"""Region-aware open-vocabulary ViT pretraining on a numpy autodiff core."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .kernels import BACKEND

__all__ = ["Tensor", "backward", "no_grad", "BACKEND", "__version__"]
