"""
Evaluation metrics: test NLL, maximum mean discrepancy, simulation-based
calibration ranks and their uniformity.

Everything here is a pure function of sample arrays in normalized
coordinates.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Optional, Protocol, Tuple

import numpy as np
import orjson
from scipy.spatial.distance import cdist
from tqdm import tqdm

from .errors import ConfigError, NumericalError, ShapeMismatchError
from .logger import progress_enabled
from .seeding import derive_seed

logger = logging.getLogger(__name__)

# k(a, b) = exp(−c·‖a − b‖²)
KERNELS: Dict[str, float] = {
    "unit": 0.5,   # unit length-scale
    "plain": 1.0,
}


class NllModel(Protocol):
    def nll(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


# --- MMD --------------------------------------------------------------------------

@dataclass
class MmdResult:
    value: float
    n_p: int
    n_q: int
    kernel: str
    bandwidth: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def mmd(P: np.ndarray, Q: np.ndarray, kernel: str = "unit") -> MmdResult:
    """
    Biased (V-statistic) squared MMD with a squared-exponential kernel.

        mean k(P, P) + mean k(Q, Q) − 2 mean k(P, Q)
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if kernel not in KERNELS:
        raise ConfigError(f"unknown MMD kernel '{kernel}', expected one of {sorted(KERNELS)}")
    if len(P) == 0 or len(Q) == 0:
        raise ConfigError("MMD needs two non-empty sample sets")
    if P.shape[1] != Q.shape[1]:
        raise ShapeMismatchError("mmd", -1, (P.shape, Q.shape), "sample sets differ in dimension")
    c = KERNELS[kernel]
    k_pp = np.exp(-c * cdist(P, P, "sqeuclidean")).mean()
    k_qq = np.exp(-c * cdist(Q, Q, "sqeuclidean")).mean()
    k_pq = np.exp(-c * cdist(P, Q, "sqeuclidean")).mean()
    value = float(k_pp + k_qq - 2.0 * k_pq)
    return MmdResult(value=value, n_p=len(P), n_q=len(Q), kernel=kernel, bandwidth=math.sqrt(0.5 / c))


# --- NLL --------------------------------------------------------------------------

def test_nll(model: NllModel, X: np.ndarray, Y: np.ndarray, chunk: int = 2048) -> float:
    """Mean per-sample NLL of a trained model on a (normalized) split."""
    if len(X) == 0:
        raise ConfigError("test split is empty")
    total = 0.0
    for start in range(0, len(X), chunk):
        total += float(np.sum(model.nll(X[start:start + chunk], Y[start:start + chunk])))
    return total / len(X)


test_nll.__test__ = False  # not a pytest test


def relative_sample_error(X_a: np.ndarray, X_b: np.ndarray) -> float:
    """‖X_a − X_b‖_F / ‖X_b‖_F."""
    X_a, X_b = np.asarray(X_a, dtype=np.float64), np.asarray(X_b, dtype=np.float64)
    if X_a.shape != X_b.shape:
        raise ShapeMismatchError("relative_sample_error", -1, (X_a.shape, X_b.shape))
    denom = np.linalg.norm(X_b)
    if denom == 0.0:
        raise NumericalError("relative error against an all-zero reference")
    return float(np.linalg.norm(X_a - X_b) / denom)


# --- SBC --------------------------------------------------------------------------

# (count, rng) -> (x*, y*) rows drawn from the joint
PairSampler = Callable[[int, np.random.Generator], Tuple[np.ndarray, np.ndarray]]
# (y, L, seed) -> L posterior draws, an array or an object with .x and .converged
PosteriorSampler = Callable[[np.ndarray, int, int], Any]


@dataclass
class SbcResult:
    ranks: np.ndarray            # (M, d), entries in {0, …, L}
    L: int
    non_converged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def M(self) -> int:
        return int(self.ranks.shape[0])

    @property
    def dims(self) -> int:
        return int(self.ranks.shape[1])

    def counts(self, dim: int) -> np.ndarray:
        return np.bincount(self.ranks[:, dim], minlength=self.L + 1)

    def ecdf(self, dim: int) -> np.ndarray:
        """Empirical CDF of the ranks at 0, …, L."""
        return np.cumsum(self.counts(dim)) / self.M

    def ks(self) -> np.ndarray:
        return ks_uniformity(self.ranks, self.L)


def _draws(result: Any) -> Tuple[np.ndarray, int]:
    if hasattr(result, "x"):
        converged = getattr(result, "converged", None)
        failed = 0 if converged is None else int(np.sum(~np.asarray(converged, dtype=bool)))
        return np.atleast_2d(result.x), failed
    return np.atleast_2d(np.asarray(result, dtype=np.float64)), 0


def sbc_ranks(pairs: PairSampler, posterior: PosteriorSampler, M: int, L: int, seed: int = 0) -> SbcResult:
    """
    Ranks of the true x* among L posterior draws given y*, per dimension.

    rank_d = #{draws with component d strictly below x*_d}. Pair j uses the
    seed derived from (seed, "sbc", j).
    """
    if M < 1 or L < 1:
        raise ConfigError(f"SBC needs M ≥ 1 and L ≥ 1, got M={M}, L={L}")
    X_star, Y_star = pairs(M, np.random.default_rng(derive_seed(seed, "sbc", "pairs")))
    X_star = np.atleast_2d(X_star)
    ranks = np.zeros(X_star.shape, dtype=int)
    failed = np.zeros(M, dtype=int)
    for j in tqdm(range(M), desc="SBC", leave=False, disable=not progress_enabled()):
        draws, failed[j] = _draws(posterior(Y_star[j], L, derive_seed(seed, "sbc", j)))
        if draws.shape != (L, X_star.shape[1]):
            raise ShapeMismatchError("sbc_ranks", j, (draws.shape, (L, X_star.shape[1])),
                                     "posterior sampler returned the wrong number of draws")
        ranks[j] = np.sum(draws < X_star[j], axis=0)
    if failed.any():
        logger.warning(f"SBC: {int((failed > 0).sum())} of {M} pairs had non-converged posterior draws")
    return SbcResult(ranks=ranks, L=L, non_converged=failed)


def ks_uniformity(ranks: np.ndarray, L: int) -> np.ndarray:
    """
    Per-dimension sup-distance between the empirical rank CDF and the CDF of
    the discrete uniform law on {0, …, L}.
    """
    ranks = np.atleast_2d(np.asarray(ranks, dtype=int))
    if ranks.shape[0] == 0:
        raise ConfigError("no ranks to test")
    if ranks.min() < 0 or ranks.max() > L:
        raise ConfigError(f"ranks must lie in [0, {L}]")
    uniform = np.arange(1, L + 2) / (L + 1)
    stats = np.empty(ranks.shape[1])
    for d in range(ranks.shape[1]):
        empirical = np.cumsum(np.bincount(ranks[:, d], minlength=L + 1)) / ranks.shape[0]
        stats[d] = np.max(np.abs(empirical - uniform))
    return stats


# --- records ----------------------------------------------------------------------

def config_hash(config: Dict[str, Any]) -> str:
    raw = orjson.dumps(config, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    return hashlib.sha256(raw).hexdigest()[:12]


def metric_record(metric: str, value: float, std: Optional[float] = None,
                  config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """{metric, value, std, config_hash}; non-finite numbers become null."""

    def finite(v: Optional[float]) -> Optional[float]:
        return float(v) if v is not None and math.isfinite(v) else None

    return {
        "metric": metric,
        "value": finite(value),
        "std": finite(std),
        "config_hash": config_hash(config) if config is not None else None,
    }
