"""
Joint-Gaussian benchmark with an analytic conditional oracle.

The first ``n`` coordinates are x, the remaining ``m`` are y. Conditionals
follow from the Schur complement; the optimal transport map from N(0, I)
onto N(mean, cov) is z ↦ mean + cov^{1/2} z.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Tuple

import numpy as np
import orjson
from scipy.linalg import sqrtm

from .datasets import Dataset, split_indices
from .errors import ConfigError, FactorizationError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianBenchSpec:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (len(mean), len(mean)):
            raise ConfigError(f"covariance shape {cov.shape} does not match mean length {len(mean)}")
        if not 1 <= self.n < len(mean):
            raise ConfigError(f"x-dimension n={self.n} must leave at least one y coordinate")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise FactorizationError(int(np.argmin(np.linalg.eigvalsh(cov)))) from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def m(self) -> int:
        return len(self.mean) - self.n

    @property
    def blocks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        return self.cov[:n, :n], self.cov[:n, n:], self.cov[n:, n:]

    def affine(self, shift: np.ndarray, scale: np.ndarray) -> "GaussianBenchSpec":
        """Spec of (v − shift) / scale for v from this spec."""
        scale = np.asarray(scale, dtype=np.float64)
        inv = 1.0 / scale
        return GaussianBenchSpec(mean=(self.mean - shift) * inv, cov=self.cov * np.outer(inv, inv), n=self.n)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "n": self.n}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianBenchSpec":
        try:
            return cls(mean=np.asarray(data["mean"]), cov=np.asarray(data["cov"]), n=int(data["n"]))
        except KeyError as exc:
            raise ConfigError(f"Gaussian spec lacks {exc}") from exc


@dataclass
class ConditionalGaussian:
    mean: np.ndarray
    cov: np.ndarray
    sqrt_cov: np.ndarray

    def transport(self, z: np.ndarray) -> np.ndarray:
        """Brenier map of N(0, I) onto this conditional, row-wise."""
        return self.mean + np.atleast_2d(z) @ self.sqrt_cov.T

    @property
    def entropy(self) -> float:
        n = len(self.mean)
        _, logdet = np.linalg.slogdet(self.cov)
        return 0.5 * n * (1.0 + LOG_2PI) + 0.5 * logdet

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        diff = x - self.mean
        sol = np.linalg.solve(self.cov, diff.T).T
        _, logdet = np.linalg.slogdet(self.cov)
        return -0.5 * np.sum(diff * sol, axis=1) - 0.5 * (len(self.mean) * LOG_2PI + logdet)


def load_spec(path: str | Path) -> GaussianBenchSpec:
    try:
        return GaussianBenchSpec.from_dict(orjson.loads(Path(path).read_bytes()))
    except (FileNotFoundError, orjson.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read Gaussian spec {path}: {exc}") from exc


def analytic_conditional(spec: GaussianBenchSpec, y) -> ConditionalGaussian:
    """
    Law of x given y.

    mean = μx + Σxy Σyy⁻¹ (y − μy), cov = Σxx − Σxy Σyy⁻¹ Σyx.
    """
    sxx, sxy, syy = spec.blocks
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != spec.m:
        raise ConfigError(f"y must have {spec.m} entries, got {len(y)}")
    try:
        gain = np.linalg.solve(syy, sxy.T).T
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(0) from exc
    mean = spec.mean[:spec.n] + gain @ (y - spec.mean[spec.n:])
    cov = sxx - gain @ sxy.T
    cov = 0.5 * (cov + cov.T)
    sqrt_cov = np.real(sqrtm(cov))
    return ConditionalGaussian(mean=mean, cov=cov, sqrt_cov=0.5 * (sqrt_cov + sqrt_cov.T))


def conditional_entropy(spec: GaussianBenchSpec) -> float:
    """Entropy of x | y; the same for every y."""
    return analytic_conditional(spec, spec.mean[spec.n:]).entropy


class GaussianOracle:
    """
    Analytic answers for a benchmark dataset, in the dataset's normalized
    coordinates (the ones models train in).
    """

    def __init__(self, spec: GaussianBenchSpec, dataset: Dataset):
        self.raw = spec
        shift = np.concatenate([dataset.x_mean, dataset.y_mean])
        scale = np.concatenate([dataset.x_std, dataset.y_std])
        self.spec = spec.affine(shift, scale)

    def conditional(self, y_norm) -> ConditionalGaussian:
        return analytic_conditional(self.spec, y_norm)

    @property
    def entropy(self) -> float:
        return conditional_entropy(self.spec)

    def nll(self, x_norm: np.ndarray, y_norm: np.ndarray) -> np.ndarray:
        """Per-row conditional negative log-density."""
        x_norm, y_norm = np.atleast_2d(x_norm), np.atleast_2d(y_norm)
        return np.array([-self.conditional(yi).log_density(xi[None, :])[0] for xi, yi in zip(x_norm, y_norm)])

    def sample(self, y_norm, N: int, rng: np.random.Generator) -> np.ndarray:
        cond = self.conditional(y_norm)
        return cond.transport(rng.standard_normal((N, self.spec.n)))

    def sampler(self) -> Callable[[np.ndarray, int, np.random.Generator], np.ndarray]:
        return self.sample

    def joint_sample(self, N: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        draws = rng.multivariate_normal(self.spec.mean, self.spec.cov, size=N)
        return draws[:, :self.spec.n], draws[:, self.spec.n:]


def sample_joint(spec: GaussianBenchSpec, N: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(spec.cov)
    return spec.mean + rng.standard_normal((N, len(spec.mean))) @ chol.T


def gaussian_bench(spec: GaussianBenchSpec, N: int, seed: int) -> Tuple[Dataset, GaussianOracle]:
    """N joint draws as an 8:1:1 conditional dataset plus its oracle."""
    if N < 3:
        raise ConfigError(f"need at least 3 draws, got N={N}")
    draws = sample_joint(spec, N, seed)
    dataset = Dataset.build(
        draws[:, :spec.n],
        draws[:, spec.n:],
        split_indices(N, (0.8, 0.1), seed),
        task="conditional",
        meta={"source": "gaussian", "spec": spec.to_dict(), "seed": int(seed)},
    )
    return dataset, GaussianOracle(spec, dataset)


def oracle_for(dataset: Dataset) -> GaussianOracle:
    """Rebuild the oracle of a stored benchmark dataset."""
    spec = dataset.meta.get("spec")
    if spec is None:
        raise ConfigError("dataset was not produced by the Gaussian benchmark")
    return GaussianOracle(GaussianBenchSpec.from_dict(spec), dataset)


def default_spec() -> GaussianBenchSpec:
    """Correlated n=2, m=1 benchmark used when no spec file is given."""
    return GaussianBenchSpec(
        mean=np.array([0.5, -0.5, 1.0]),
        cov=np.array([[1.0, 0.6, 0.4],
                      [0.6, 1.5, -0.3],
                      [0.4, -0.3, 1.0]]),
        n=2,
    )
