"""
PCA projection of high-dimensional observations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.decomposition import PCA

from .datasets import Dataset
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class Projection:
    basis: np.ndarray          # (dim, k), orthonormal columns
    mean: np.ndarray           # (dim,)
    explained_variance_ratio: np.ndarray
    projected: np.ndarray      # (N, k)

    @property
    def explained(self) -> float:
        return float(np.sum(self.explained_variance_ratio))

    def project(self, data: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(data) - self.mean) @ self.basis

    def lift(self, coords: np.ndarray) -> np.ndarray:
        return np.atleast_2d(coords) @ self.basis.T + self.mean


def pca_project(data: np.ndarray, k: int) -> Projection:
    """Top-k principal directions of the empirical covariance."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    N, dim = data.shape
    if not 1 <= k <= min(N, dim):
        raise ConfigError(f"k={k} must lie in [1, {min(N, dim)}]")
    pca = PCA(n_components=k, svd_solver="full")
    projected = pca.fit_transform(data)
    logger.debug(f"PCA: k={k} of {dim} explains {pca.explained_variance_ratio_.sum():.4f}")
    return Projection(
        basis=pca.components_.T.copy(),
        mean=pca.mean_.copy(),
        explained_variance_ratio=pca.explained_variance_ratio_.copy(),
        projected=projected,
    )


def project_y(dataset: Dataset, k: int) -> Dataset:
    """
    Replace the y-columns by their top-k principal coordinates.

    The basis is fitted on the training rows only; splits are kept.
    """
    projection = pca_project(dataset.Y[dataset.splits["train"]], k)
    logger.info(f"Projected y from {dataset.m} to {k} columns, explained variance {projection.explained:.4f}")
    return Dataset.build(
        dataset.X,
        projection.project(dataset.Y),
        dataset.splits,
        x_columns=dataset.x_columns,
        y_columns=[f"pc{i + 1}" for i in range(k)],
        task=dataset.task,
        meta={**dataset.meta, "pca_y": {"k": k, "explained": projection.explained}},
    )
