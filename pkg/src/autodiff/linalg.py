"""
Log-determinant of symmetric positive definite matrices.

The primitive accepts either one square matrix or a batch of matrices
stored one per row (row b holds an n×n matrix flattened, ``n`` given as an
attribute). The value comes from a Cholesky factor,
log det H = 2·Σ log L_ii, and the adjoint is s·sym(H⁻¹).
"""

from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import lapack

from ..errors import AsymmetryError, AutodiffUsageError, FactorizationError, ShapeMismatchError
from .ops import Primitive, apply, mul
from .tape import Tensor, TensorLike

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10


def _stack(h: np.ndarray, n: Optional[int]) -> np.ndarray:
    if n is None:
        if h.shape[0] != h.shape[1]:
            raise ValueError(f"expected a square matrix, got {h.shape}")
        return h.reshape(1, *h.shape)
    if h.shape[1] != n * n:
        raise ValueError(f"rows must hold {n}x{n} matrices, got width {h.shape[1]}")
    return h.reshape(h.shape[0], n, n)


def check_symmetric(mats: np.ndarray, tol: float = SYMMETRY_TOL) -> None:
    scale = max(1.0, float(np.max(np.abs(mats)))) if mats.size else 1.0
    deviation = float(np.max(np.abs(mats - np.swapaxes(mats, 1, 2)))) if mats.size else 0.0
    if deviation > tol * scale:
        raise AsymmetryError(deviation, tol * scale)


def _failing_pivot(mats: np.ndarray) -> Tuple[int, int]:
    for b, mat in enumerate(mats):
        _, info = lapack.dpotrf(mat, lower=True, clean=False)
        if info > 0:
            return info - 1, b
    # numpy and LAPACK disagreed; report the smallest diagonal
    b = int(np.argmin(np.min(np.diagonal(mats, axis1=1, axis2=2), axis=1)))
    return int(np.argmin(np.diagonal(mats[b]))), b


class SpdLogdet(Primitive):
    name = "spd_logdet"
    first_order_only = True

    def forward(self, h, n=None):
        mats = _stack(h, n)
        check_symmetric(mats)
        try:
            chol = np.linalg.cholesky(mats)
        except np.linalg.LinAlgError:
            pivot, sample = _failing_pivot(mats)
            raise FactorizationError(pivot, sample if n is not None else None) from None
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        return logdet.reshape(-1, 1)

    def vjp(self, out, attrs, g, parents, needs):
        h = parents[0].value
        n = attrs.get("n")
        inv = np.linalg.inv(_stack(h, n))
        sym = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        return [mul(g, Tensor(sym.reshape(h.shape)))]

    def jvp(self, out, attrs, tangents, parents):
        raise AutodiffUsageError("spd_logdet has no tangent rule")


SPD_LOGDET = SpdLogdet()


def spd_logdet(h: TensorLike, n: Optional[int] = None) -> Tensor:
    """
    log det H for SPD H.

    Args:
        h: a square matrix, or a (batch, n*n) array with one flattened matrix per row
        n: matrix size for the batched layout

    Returns:
        (1, 1) for a single matrix, (batch, 1) otherwise
    """
    return apply(SPD_LOGDET, [h], n=n)


def logdet_eig(h: np.ndarray, n: Optional[int] = None) -> np.ndarray:
    """Eigenvalue cross-check of :func:`spd_logdet` (values only)."""
    h = np.asarray(h, dtype=np.float64)
    try:
        mats = _stack(h, n)
    except ValueError as exc:
        raise ShapeMismatchError("logdet_eig", -1, h.shape, str(exc)) from exc
    eig = np.linalg.eigvalsh(mats)
    bad = eig <= 0.0
    if np.any(bad):
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise FactorizationError(int(np.flatnonzero(bad[row])[0]), sample=row)
    return np.sum(np.log(eig), axis=1).reshape(-1, 1)


def min_eigenvalues(h: np.ndarray, n: Optional[int] = None) -> np.ndarray:
    return np.linalg.eigvalsh(_stack(np.asarray(h, dtype=np.float64), n)).min(axis=1)
