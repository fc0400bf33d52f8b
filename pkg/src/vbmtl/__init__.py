"""Multi-task vocal-burst emotion learning on a from-scratch numpy autodiff core."""
from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
