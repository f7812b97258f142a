"""Permutation-invariant set feature extraction via dual-MLP dot-product
aggregation, a numerical decomposition lab, and a desk-scale trainer."""

__version__ = "0.1.0"

from .rng import RngState
from .tensor import Tensor, backward, finite_difference_gradient

__all__ = ["RngState", "Tensor", "backward", "finite_difference_gradient", "__version__"]
