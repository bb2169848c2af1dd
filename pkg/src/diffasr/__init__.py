"""Toy masked-diffusion speech transcriber with parallel multi-candidate decoding."""

from .eval import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
