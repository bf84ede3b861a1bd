"""
Tape-based differentiation on rank-2 float64 arrays.
"""

from . import ops
from .linalg import logdet_eig, min_eigenvalues, spd_logdet
from .tape import Tape, Tensor, as_tensor, backward, evaluate, hvp

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "evaluate",
    "hvp",
    "logdet_eig",
    "min_eigenvalues",
    "ops",
    "spd_logdet",
]
