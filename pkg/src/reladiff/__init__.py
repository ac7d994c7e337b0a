"""Conditional denoising diffusion with relativistic adversarial supervision,
built on a small numpy autodiff engine."""

from .volume import Volume

__all__ = ["Volume"]
__version__ = "0.1.0"
