"""Consistency-regularized class activation maps, desk scale.

A from-scratch study of siamese equivariant training for weakly
supervised localization: a minimal reverse-mode autodiff engine, affine
warps, a pixel-affinity refinement module, the consistency losses, and a
synthetic-shapes benchmark tying them together. Hot kernels run on a
compiled backend when available (see ``seamcam._kernels``).
"""

from ._kernels import BACKEND as kernel_backend
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "kernel_backend", "__version__"]
