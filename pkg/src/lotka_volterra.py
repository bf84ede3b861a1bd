"""
Stochastic Lotka–Volterra predator–prey model.

Four reactions on the populations S = (S1 predators, S2 prey):

    predator birth   x1·S1·S2   S1 += 1
    predator death   x2·S1      S1 -= 1
    prey birth       x3·S2      S2 += 1
    prey death       x4·S1·S2   S2 -= 1

simulated exactly with Gillespie's algorithm from S(0) = (50, 100) and
recorded on an equispaced grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from tqdm import tqdm

from .datasets import Dataset, split_indices
from .errors import ConfigError, DatasetError
from .logger import progress_enabled

logger = logging.getLogger(__name__)

INITIAL_STATE = (50, 100)
HORIZON = 30.0
RECORD_DT = 0.2
MAX_EVENTS = 100_000
LOG_PRIOR_LOW, LOG_PRIOR_HIGH = -5.0, 2.0
VARIANCE_FLOOR = 1e-12
REFERENCE_RATES = (0.01, 0.5, 1.0, 0.01)

SUMMARY_NAMES = (
    "mean_s1", "mean_s2",
    "logvar_s1", "logvar_s2",
    "acf1_s1", "acf2_s1",
    "acf1_s2", "acf2_s2",
    "xcorr",
)


@dataclass(frozen=True)
class LvParams:
    rates: Tuple[float, float, float, float]

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        if len(rates) != 4:
            raise ConfigError(f"Lotka-Volterra needs 4 rates, got {len(rates)}")
        if any(not np.isfinite(r) or r < 0 for r in rates):
            raise ConfigError(f"rates must be finite and non-negative, got {rates}")
        object.__setattr__(self, "rates", rates)

    @classmethod
    def from_log(cls, log_rates) -> "LvParams":
        return cls(tuple(np.exp(np.asarray(log_rates, dtype=np.float64))))

    @property
    def log_rates(self) -> np.ndarray:
        return np.log(np.asarray(self.rates))

    def in_prior_support(self) -> bool:
        with np.errstate(divide="ignore"):
            log_rates = self.log_rates
        return bool(np.all((log_rates >= LOG_PRIOR_LOW) & (log_rates <= LOG_PRIOR_HIGH)))


@dataclass
class LvTrajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), 2)
    events: int
    truncated: bool


def sample_prior(N: int, rng: np.random.Generator) -> np.ndarray:
    """Log-rates drawn uniformly from the prior box, shape (N, 4)."""
    return rng.uniform(LOG_PRIOR_LOW, LOG_PRIOR_HIGH, size=(N, 4))


def record_grid(horizon: float = HORIZON, record_dt: float = RECORD_DT) -> np.ndarray:
    return np.linspace(0.0, horizon, int(round(horizon / record_dt)) + 1)


def gillespie_lv(params: LvParams, horizon: float = HORIZON, record_dt: float = RECORD_DT,
                 max_events: int = MAX_EVENTS, seed=None,
                 rng: Optional[np.random.Generator] = None) -> LvTrajectory:
    """
    Exact stochastic simulation of the predator–prey system.

    The state at grid time τ is the state of the jump process at τ. Hitting
    ``max_events`` stops the simulation and holds the current state for the
    rest of the grid (``truncated`` is set).
    """
    if horizon <= 0 or record_dt <= 0:
        raise ConfigError(f"horizon and record_dt must be positive, got {horizon}, {record_dt}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    x1, x2, x3, x4 = params.rates
    grid = record_grid(horizon, record_dt)
    states = np.empty((len(grid), 2))
    s1, s2 = INITIAL_STATE
    t = 0.0
    k = 0
    events = 0
    truncated = False
    propensity = np.empty(4)

    while k < len(grid):
        propensity[0] = x1 * s1 * s2
        propensity[1] = x2 * s1
        propensity[2] = x3 * s2
        propensity[3] = x4 * s1 * s2
        total = propensity.sum()
        if total <= 0.0:
            break
        t_next = t + rng.exponential(1.0 / total)
        while k < len(grid) and grid[k] < t_next:
            states[k] = (s1, s2)
            k += 1
        if k == len(grid):
            break
        reaction = int(np.searchsorted(np.cumsum(propensity), rng.random() * total, side="right"))
        if reaction == 0:
            s1 += 1
        elif reaction == 1:
            s1 -= 1
        elif reaction == 2:
            s2 += 1
        else:
            s2 -= 1
        t = t_next
        events += 1
        if events >= max_events:
            truncated = True
            break

    states[k:] = (s1, s2)
    return LvTrajectory(times=grid, states=states, events=events, truncated=truncated)


def _autocorrelation(d: np.ndarray, lag: int, denom: float) -> float:
    if denom <= VARIANCE_FLOOR * len(d):
        return 0.0
    return float(np.dot(d[:-lag], d[lag:]) / denom)


def lv_summary(series: np.ndarray) -> np.ndarray:
    """
    Nine summary statistics of a (T, 2) series.

    Order: means (S1, S2), log-variances (S1, S2), S1 autocorrelation at lags
    1 and 2, S2 autocorrelation at lags 1 and 2, cross-correlation. Variances
    use 1/T; autocorrelation is Σ d_t·d_{t+k} / Σ d_t² with d the centred
    series; a (near) constant series gives log(floor) and zero correlations.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[1] != 2:
        raise DatasetError(f"expected a (T, 2) series, got shape {series.shape}")
    if series.shape[0] < 3:
        raise DatasetError(f"series needs at least 3 points, got {series.shape[0]}")

    means = series.mean(axis=0)
    d = series - means
    ss = np.sum(d * d, axis=0)
    var = np.maximum(ss / series.shape[0], VARIANCE_FLOOR)
    acf = [_autocorrelation(d[:, j], lag, ss[j]) for j in (0, 1) for lag in (1, 2)]
    denom = np.sqrt(ss[0] * ss[1])
    xcorr = float(np.dot(d[:, 0], d[:, 1]) / denom) if denom > VARIANCE_FLOOR * series.shape[0] else 0.0
    stats = np.concatenate([means, np.log(var), acf, [xcorr]])
    return np.clip(stats, [-np.inf] * 4 + [-1.0] * 5, [np.inf] * 4 + [1.0] * 5)


def simulate_summaries(log_rates: np.ndarray, master_seed: int, start_index: int = 0,
                       **sim_kwargs) -> Tuple[np.ndarray, np.ndarray]:
    """
    Summaries for each row of log-rates.

    Draw i uses the generator seeded with (master_seed, start_index + i).

    Returns:
        (summaries (N, 9), truncated flags (N,))
    """
    log_rates = np.atleast_2d(log_rates)
    out = np.empty((len(log_rates), len(SUMMARY_NAMES)))
    truncated = np.zeros(len(log_rates), dtype=bool)
    for i in tqdm(range(len(log_rates)), desc="Simulating", leave=False, disable=not progress_enabled()):
        rng = np.random.default_rng([int(master_seed), int(start_index + i)])
        traj = gillespie_lv(LvParams.from_log(log_rates[i]), rng=rng, **sim_kwargs)
        out[i] = lv_summary(traj.states)
        truncated[i] = traj.truncated
    if truncated.any():
        logger.warning(f"{int(truncated.sum())} of {len(log_rates)} simulations hit the event cap")
    return out, truncated


def observe(rates=REFERENCE_RATES, seed: int = 0, **sim_kwargs) -> np.ndarray:
    """Summary statistics y* of one simulation at known rates."""
    traj = gillespie_lv(LvParams(tuple(rates)), seed=seed, **sim_kwargs)
    return lv_summary(traj.states)


def build_lv_dataset(N: int, seed: int, **sim_kwargs) -> Dataset:
    """
    Prior draws, simulations and summaries as a 9:1 train/valid dataset.

    x holds log-rates, y the nine summaries. Very small N still builds: a
    single training row is centered but not rescaled.
    """
    if N < 1:
        raise DatasetError(f"need at least one simulation, got N={N}")
    prior_rng = np.random.default_rng([int(seed), 2**31 - 1])
    log_rates = sample_prior(N, prior_rng)
    summaries, truncated = simulate_summaries(log_rates, seed, **sim_kwargs)
    splits = split_indices(N, (0.9, 0.1), seed)
    # every row goes to train or valid, no test split
    splits["valid"] = np.sort(np.concatenate([splits["valid"], splits["test"]]))
    splits["test"] = np.zeros(0, dtype=int)
    return Dataset.build(
        log_rates,
        summaries,
        splits,
        allow_constant=True,
        x_columns=[f"log_x{i + 1}" for i in range(4)],
        y_columns=list(SUMMARY_NAMES),
        task="lfi",
        meta={"source": "lotka_volterra", "seed": int(seed), "truncated": int(truncated.sum()),
              "truncated_rows": np.flatnonzero(truncated).tolist()},
    )
