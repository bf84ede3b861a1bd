"""
Evaluation studies on trained models: step-count consistency, sampling
efficiency, calibration and the Lotka–Volterra posterior.

Every study returns a pandas DataFrame that ``src.reports`` writes as CSV.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from . import cot_flow, pcp_map
from .config import SampleConfig
from .datasets import Dataset
from .errors import ConfigError
from .experiment import evaluation_split
from .gaussian_bench import oracle_for
from .lotka_volterra import REFERENCE_RATES, observe, sample_prior, simulate_summaries
from .metrics import PairSampler, PosteriorSampler, SbcResult, relative_sample_error, sbc_ranks
from .seeding import derive_seed, generator

logger = logging.getLogger(__name__)

Model = Union[pcp_map.PcpModel, cot_flow.FlowModel]

NT_LIST = (1, 2, 4, 8, 16)
NT_REFERENCE = 32
TOLERANCES = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
EFFICIENCY_NTS = (1, 2, 4, 8, 16, 32)


# --- dispatch ---------------------------------------------------------------------

def sample_posterior(model: Model, y, N: int, seed: int, cfg: Optional[SampleConfig] = None):
    if isinstance(model, pcp_map.PcpModel):
        return pcp_map.sample_posterior(model.pot_x, y, N, cfg or model.sampling, seed)
    return cot_flow.sample_posterior(model, y, N, seed)


def map_estimate(model: Model, y, seed: int, cfg: Optional[SampleConfig] = None):
    if isinstance(model, pcp_map.PcpModel):
        return pcp_map.map_point(model.pot_x, y, cfg=cfg or model.sampling, seed=seed)
    return cot_flow.map_point(model, y, cfg=cfg, seed=seed)


def posterior_sampler(model: Model, cfg: Optional[SampleConfig] = None) -> PosteriorSampler:
    return lambda y, L, seed: sample_posterior(model, y, L, seed, cfg)


# --- nt consistency ---------------------------------------------------------------

def nt_study(model: cot_flow.FlowModel, dataset: Dataset, nt_list: Sequence[int] = NT_LIST,
             nt_ref: int = NT_REFERENCE, rows: int = 1000, seed: int = 0) -> pd.DataFrame:
    """Relative error of flow samples at each nt against the nt_ref samples, same latent draws."""
    if not isinstance(model, cot_flow.FlowModel):
        raise ConfigError("the nt study needs a COT-Flow checkpoint")
    _, Y = evaluation_split(dataset)
    Y = Y[:rows]
    z = generator(seed, "nt-study").standard_normal((len(Y), model.n))
    errors = cot_flow.nt_consistency(model.phi_x, Y, z, nt_list, nt_ref, model.alpha1)
    for nt, err in errors.items():
        logger.info(f"nt={nt:>3}: relative error {err:.3e}")
    return pd.DataFrame({"nt": list(errors), "nt_ref": nt_ref, "relative_error": list(errors.values())})


# --- sampling efficiency ----------------------------------------------------------

def _timed(fn, repeats: int):
    times, out = [], None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return out, float(np.mean(times)), float(np.std(times))


def efficiency_study(model: Model, y, N: int = 2000, repeats: int = 5, seed: int = 0,
                     tolerances: Sequence[float] = TOLERANCES, nts: Sequence[int] = EFFICIENCY_NTS,
                     sampling: Optional[SampleConfig] = None) -> pd.DataFrame:
    """
    Wall-clock cost of N posterior draws given y against sample accuracy.

    PCP-Map sweeps the inversion tolerance, COT-Flow sweeps the RK4 step
    count. Accuracy is the relative error against the tightest setting
    (smallest tolerance, largest nt) on the same latent draws.
    """
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    rows = []
    if isinstance(model, pcp_map.PcpModel):
        base = sampling or model.sampling
        z = generator(seed, "efficiency").standard_normal((N, model.n))
        Y = np.repeat(y, N, axis=0)
        settings = sorted(tolerances)
        reference = None
        for tol in settings:
            cfg = base.model_copy(update={"tol": float(tol)})
            draws, mean, std = _timed(lambda: pcp_map.invert(model.pot_x, z, Y, cfg), repeats)
            reference = draws.x if reference is None else reference
            rows.append({"model": "pcp", "setting": "tol", "value": tol, "seconds": mean, "seconds_std": std,
                         "relative_error": relative_sample_error(draws.x, reference),
                         "non_converged": draws.n_failed})
    else:
        z = generator(seed, "efficiency").standard_normal((N, model.n))
        Y = np.repeat(y, N, axis=0)
        settings = sorted(nts, reverse=True)
        reference = None
        for nt in settings:
            x, mean, std = _timed(lambda: cot_flow.sample_flow(model.phi_x, Y, z, nt, model.alpha1), repeats)
            reference = x if reference is None else reference
            rows.append({"model": "cot", "setting": "nt", "value": nt, "seconds": mean, "seconds_std": std,
                         "relative_error": relative_sample_error(x, reference), "non_converged": 0})
    for row in rows:
        logger.info(f"{row['model']} {row['setting']}={row['value']:g}: {row['seconds']:.3f}s "
                    f"± {row['seconds_std']:.3f}, error {row['relative_error']:.3e}")
    return pd.DataFrame(rows)


# --- calibration ------------------------------------------------------------------

def pair_sampler(dataset: Dataset) -> PairSampler:
    """
    Joint (x*, y*) draws in normalized coordinates.

    Gaussian benchmarks use their oracle, Lotka–Volterra datasets draw from
    the prior and simulate; anything else resamples held-out rows.
    """
    source = dataset.meta.get("source")
    if source == "gaussian":
        oracle = oracle_for(dataset)
        return oracle.joint_sample
    if source == "lotka_volterra":
        def simulate(M: int, rng: np.random.Generator):
            log_rates = sample_prior(M, rng)
            summaries, _ = simulate_summaries(log_rates, int(rng.integers(2**31)))
            return dataset.normalize_x(log_rates), dataset.normalize_y(summaries)
        return simulate

    X, Y = evaluation_split(dataset)

    def resample(M: int, rng: np.random.Generator):
        idx = rng.choice(len(X), size=M, replace=M > len(X))
        return X[idx], Y[idx]
    return resample


def sbc_study(model: Model, dataset: Dataset, M: int = 200, L: int = 100, seed: int = 0,
              cfg: Optional[SampleConfig] = None) -> SbcResult:
    result = sbc_ranks(pair_sampler(dataset), posterior_sampler(model, cfg), M, L, seed)
    for d, ks in enumerate(result.ks()):
        logger.info(f"SBC dim {d}: KS distance {ks:.3f}")
    return result


def sbc_frame(result: SbcResult) -> pd.DataFrame:
    """Rank CDFs next to the uniform reference, one row per (dim, rank)."""
    uniform = np.arange(1, result.L + 2) / (result.L + 1)
    frames = [pd.DataFrame({"dim": d, "rank": np.arange(result.L + 1), "count": result.counts(d),
                            "ecdf": result.ecdf(d), "uniform": uniform})
              for d in range(result.dims)]
    return pd.concat(frames, ignore_index=True)


# --- Lotka–Volterra posterior -----------------------------------------------------

@dataclass
class LvPosterior:
    rates: np.ndarray                  # (N, 4) posterior draws in the original domain
    map_rates: np.ndarray              # (4,)
    true_rates: np.ndarray             # (4,)
    non_converged: int

    def log10_medians(self) -> np.ndarray:
        return np.median(np.log10(self.rates), axis=0)


def lv_posterior(model: Model, dataset: Dataset, rates: Sequence[float] = REFERENCE_RATES, N: int = 2000,
                 seed: int = 0, cfg: Optional[SampleConfig] = None) -> LvPosterior:
    """
    Posterior draws and MAP point for one synthetic observation at ``rates``.

    Samples are de-normalized to log-rates and exponentiated.
    """
    y_star = dataset.normalize_y(observe(rates, seed=derive_seed(seed, "lv", "observe"))[None, :])[0]
    draws = sample_posterior(model, y_star, N, derive_seed(seed, "lv", "posterior"), cfg)
    found = map_estimate(model, y_star, derive_seed(seed, "lv", "map"), cfg)
    n_failed = getattr(draws, "n_failed", 0)
    posterior = LvPosterior(
        rates=np.exp(dataset.denormalize_x(draws.x)),
        map_rates=np.exp(dataset.denormalize_x(found.x[None, :]))[0],
        true_rates=np.asarray(rates, dtype=np.float64),
        non_converged=int(n_failed),
    )
    logger.info(f"LV posterior log10 medians {np.round(posterior.log10_medians(), 3).tolist()}, "
                f"MAP {np.round(posterior.map_rates, 4).tolist()}")
    return posterior


def histogram_frame(samples: np.ndarray, bins: int = 30, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Per-component marginal histograms; counts sum to the finite sample count."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(samples.shape[1])]
    frames = []
    for j, name in enumerate(names):
        column = samples[:, j]
        finite = column[np.isfinite(column)]
        if len(finite) < len(column):
            logger.warning(f"{name}: dropped {len(column) - len(finite)} non-finite samples from the histogram")
        if len(finite) == 0:
            continue
        counts, edges = np.histogram(finite, bins=bins)
        frames.append(pd.DataFrame({"component": name, "bin_left": edges[:-1], "bin_right": edges[1:],
                                    "count": counts}))
    if not frames:
        return pd.DataFrame(columns=["component", "bin_left", "bin_right", "count"])
    return pd.concat(frames, ignore_index=True)
