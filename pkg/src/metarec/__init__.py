"""Meta-learned cold-start rating prediction with an adaptive inner-loop loss."""
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
