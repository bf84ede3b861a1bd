"""
Static conditional transport through the gradient of a strictly convex
potential.

The potential G(x, y) is convex in x, its x-gradient is the inverse map
z = ∇ₓG(x; y) from data to the standard normal reference, and training
maximizes the likelihood of the pushforward. Sampling inverts the gradient
by minimizing G(v, y) − zᵀv with L-BFGS.

In joint mode a second, fully convex potential in y is trained alongside and
the generator is block triangular: y first, then x given y.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import lbfgs
from .autodiff import Tape, Tensor, ops
from .config import PcpTrainConfig, SampleConfig
from .datasets import Dataset
from .errors import ConfigError, DivergenceError, NumericalError
from .potentials import (
    FicnnDims,
    FicnnParams,
    ParamSet,
    PicnnDims,
    StrictPotentialParams,
    ficnn_potential,
    init_params,
    project_nonneg,
    recorded_log_density,
    recorded_map,
    strict_potential,
)
from .records import RunRecord
from .seeding import derive_seed
from .training import LoopSettings, chunked_mean, fit

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def _tape_of(params: ParamSet) -> Optional[Tape]:
    for value in params.arrays.values():
        if isinstance(value, Tensor) and value.tape is not None:
            return value.tape
    return None


# --- objectives -----------------------------------------------------------------

def nll_terms(params: StrictPotentialParams, x, y, tape: Optional[Tape] = None) -> Tensor:
    """Per-row ½‖∇ₓG‖² − log det ∇ₓ²G on the tape of ``params`` (or a new one)."""
    tape = tape or _tape_of(params) or Tape()
    xt = tape.leaf(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    return recorded_log_density(tape, lambda v: strict_potential(params, v, y), xt)


def nll_loss(params: StrictPotentialParams, x, y) -> Tensor:
    """
    Mean training objective over a batch.

    Excludes the (n/2)·ln 2π constant, so the identity map gives mean ½‖x‖².
    """
    return ops.mean(nll_terms(params, x, y))


def ficnn_nll_terms(params: FicnnParams, y, tape: Optional[Tape] = None) -> Tensor:
    tape = tape or _tape_of(params) or Tape()
    yt = tape.leaf(np.asarray(y, dtype=np.float64))
    return recorded_log_density(tape, lambda v: ficnn_potential(params, v), yt)


def joint_nll(pot_x: StrictPotentialParams, pot_y: FicnnParams, x, y) -> Tensor:
    """
    Objective of the block-triangular inverse map (x, y) ↦ (g⁻¹(x; y), h⁻¹(y)).

    Its Jacobian log-determinant splits into the two diagonal blocks, so the
    loss is the sum of the conditional and the marginal objectives.
    """
    tape = _tape_of(pot_x) or _tape_of(pot_y) or Tape()
    x_part = ops.mean(nll_terms(pot_x, x, y, tape=tape))
    y_part = ops.mean(ficnn_nll_terms(pot_y, y, tape=tape))
    return ops.add(x_part, y_part)


# --- model --------------------------------------------------------------------

@dataclass
class PcpModel:
    """Trained potentials; ``pot_y`` is set in joint mode only."""

    pot_x: StrictPotentialParams
    pot_y: Optional[FicnnParams] = None
    sampling: SampleConfig = field(default_factory=SampleConfig)

    kind = "pcp"

    @property
    def joint(self) -> bool:
        return self.pot_y is not None

    @property
    def checkpoint_kind(self) -> str:
        return "pcp-joint" if self.joint else "pcp"

    def models(self) -> Dict[str, ParamSet]:
        out: Dict[str, ParamSet] = {"x": self.pot_x}
        if self.pot_y is not None:
            out["y"] = self.pot_y
        return out

    @classmethod
    def from_models(cls, models: Dict[str, ParamSet], sampling: Optional[SampleConfig] = None) -> "PcpModel":
        return cls(pot_x=models["x"], pot_y=models.get("y"), sampling=sampling or SampleConfig())

    @property
    def n(self) -> int:
        return int(self.pot_x.dims["n"])

    @property
    def m(self) -> int:
        return int(self.pot_x.dims["m"])

    def nll(self, x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """
        Per-row negative log-likelihood including the Gaussian constant.

        Conditional mode scores x | y, joint mode scores (x, y).
        """
        return nll_samples(self, x, y, chunk)

    def sample(self, y: np.ndarray, seed: int, cfg: Optional[SampleConfig] = None) -> "PosteriorSamples":
        """One conditional draw per row of ``y``."""
        return sample_conditional(self.pot_x, y, cfg or self.sampling, seed)


def nll_samples(model: PcpModel, x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    out = np.empty(len(x))
    for start in range(0, len(x), chunk):
        sl = slice(start, start + chunk)
        values = nll_terms(model.pot_x, x[sl], y[sl]).value[:, 0] + 0.5 * model.n * LOG_2PI
        if model.pot_y is not None:
            values = values + ficnn_nll_terms(model.pot_y, y[sl]).value[:, 0] + 0.5 * model.m * LOG_2PI
        out[sl] = values
    return out


# --- training -------------------------------------------------------------------

def init_model(config: PcpTrainConfig, n: int, m: int) -> PcpModel:
    dims = PicnnDims(n=n, m=m, width=config.width, depth=config.depth, context_width=config.context_width)
    pot_x = init_params(dims, seed=derive_seed(config.seed, "pcp", "x"))
    pot_y = None
    if config.joint:
        fdims = FicnnDims(m=m, width=config.ficnn_width or config.width, depth=config.ficnn_depth or config.depth)
        pot_y = init_params(fdims, seed=derive_seed(config.seed, "pcp", "y"))
    return PcpModel(pot_x=pot_x, pot_y=pot_y, sampling=config.sampling)


def _training_loss(models, x, y) -> Tensor:
    if "y" in models:
        return joint_nll(models["x"], models["y"], x, y)
    return nll_loss(models["x"], x, y)


def _project(models):
    return {role: project_nonneg(p) for role, p in models.items()}


def train(config: PcpTrainConfig, dataset: Dataset, run_id: Optional[str] = None,
          model: Optional[PcpModel] = None) -> Tuple[PcpModel, RunRecord]:
    """
    Maximum-likelihood training with projection after every Adam step.

    Args:
        config: training configuration
        dataset: normalized dataset; joint mode needs ``config.joint``
        run_id: label used in logs and the record
        model: optional starting point instead of a fresh initialization

    Returns:
        (best-validation model, run record)

    Raises:
        DivergenceError: ``last_good`` is the model at the last good validation
    """
    if model is None:
        model = init_model(config, dataset.n, dataset.m)
    elif model.n != dataset.n or model.m != dataset.m:
        raise ConfigError(f"model dims (n={model.n}, m={model.m}) do not match the dataset "
                          f"(n={dataset.n}, m={dataset.m})")
    record = RunRecord(run_id=run_id or f"pcp-{config.seed}", model=model.checkpoint_kind,
                       config=config.model_dump(), seed=config.seed)

    def validation(models, X, Y) -> float:
        candidate = PcpModel.from_models(models, model.sampling)
        return chunked_mean(lambda a, b: candidate.nll(a, b), X, Y, config.val_batch)

    settings = LoopSettings(batch_size=config.batch_size, learning_rate=config.learning_rate,
                            epochs=config.epochs, seed=derive_seed(config.seed, "pcp", "shuffle"),
                            val_interval=config.val_interval, patience=config.patience)
    try:
        best = fit(model.models(), _training_loss, validation, dataset.train, dataset.valid,
                   settings, record, hook=_project)
    except DivergenceError as exc:
        record.set_metric("valid_nll", record.best_valid)
        raise DivergenceError(str(exc), last_good=PcpModel.from_models(exc.last_good, model.sampling),
                              record=record) from exc
    trained = PcpModel.from_models(best, model.sampling)
    record.set_metric("valid_nll", record.best_valid)
    return trained, record


# --- inversion and sampling ------------------------------------------------------

@dataclass
class PosteriorSamples:
    """Samples in normalized coordinates plus convergence flags."""

    x: np.ndarray
    converged: np.ndarray
    grad_norm: np.ndarray

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.converged))

    def denormalized(self, dataset: Dataset) -> np.ndarray:
        return dataset.denormalize_x(self.x)


def _conjugate_objective(potential, z: np.ndarray, y: Optional[np.ndarray]):
    """Rows of v ↦ G(v, y) − zᵀv with gradient ∇G − z."""

    def fun(points: np.ndarray, rows: np.ndarray):
        tape = Tape(check_finite=False)
        vt = tape.leaf(points)
        if y is None:
            values, grad = recorded_map(tape, potential, vt, create_graph=False)
        else:
            y_rows = y[rows]
            values, grad = recorded_map(tape, lambda v: potential(v, y_rows), vt, create_graph=False)
        zr = z[rows]
        return values.value[:, 0] - np.sum(zr * points, axis=1), grad.value - zr

    return fun


def invert(params: StrictPotentialParams, z, y, cfg: Optional[SampleConfig] = None,
           x0: Optional[np.ndarray] = None) -> PosteriorSamples:
    """
    Solve ∇ₓG(v; y) = z for every row by minimizing G(v, y) − zᵀv.

    Rows that stop without meeting the gradient tolerance keep their best
    iterate and are flagged.
    """
    cfg = cfg or SampleConfig()
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if len(y) == 1 and len(z) > 1:
        y = np.repeat(y, len(z), axis=0)
    if len(y) != len(z):
        raise ConfigError(f"invert needs one y per z row, got {len(y)} and {len(z)}")
    fun = _conjugate_objective(lambda v, yr: strict_potential(params, v, yr), z, y)
    result = lbfgs.minimize(fun, z if x0 is None else x0, tol=cfg.tol, max_iter=cfg.max_iter,
                            history=cfg.history)
    if result.n_failed:
        logger.warning(f"Inversion: {result.n_failed} of {len(z)} rows did not reach tol={cfg.tol:g}")
    return PosteriorSamples(x=result.x, converged=result.converged, grad_norm=result.grad_norm)


def invert_marginal(params: FicnnParams, z, cfg: Optional[SampleConfig] = None) -> PosteriorSamples:
    """Invert the gradient of the fully convex y-potential."""
    cfg = cfg or SampleConfig()
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    fun = _conjugate_objective(lambda v: ficnn_potential(params, v), z, None)
    result = lbfgs.minimize(fun, z, tol=cfg.tol, max_iter=cfg.max_iter, history=cfg.history)
    if result.n_failed:
        logger.warning(f"Marginal inversion: {result.n_failed} of {len(z)} rows did not converge")
    return PosteriorSamples(x=result.x, converged=result.converged, grad_norm=result.grad_norm)


def sample_posterior(params: StrictPotentialParams, y, N: int, cfg: Optional[SampleConfig] = None,
                     seed: int = 0) -> PosteriorSamples:
    """N draws of x given a single conditioning vector y."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((N, int(params.dims["n"])))
    return invert(params, z, np.repeat(y, N, axis=0), cfg)


def sample_conditional(params: StrictPotentialParams, Y, cfg: Optional[SampleConfig] = None,
                       seed: int = 0) -> PosteriorSamples:
    """One draw of x for each row of Y."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    z = np.random.default_rng(seed).standard_normal((len(Y), int(params.dims["n"])))
    return invert(params, z, Y, cfg)


def sample_joint(model: PcpModel, N: int, cfg: Optional[SampleConfig] = None,
                 seed: int = 0) -> Tuple[PosteriorSamples, PosteriorSamples]:
    """
    Draws from the joint model: y from the marginal map, then x given y.

    Returns:
        (y samples, x samples)
    """
    if model.pot_y is None:
        raise ConfigError("joint sampling needs a model trained in joint mode")
    rng = np.random.default_rng(seed)
    y_samples = invert_marginal(model.pot_y, rng.standard_normal((N, model.m)), cfg)
    z_x = rng.standard_normal((N, model.n))
    x_samples = invert(model.pot_x, z_x, y_samples.x, cfg)
    return y_samples, x_samples


# --- MAP ------------------------------------------------------------------------

@dataclass
class MapResult:
    x: np.ndarray
    log_density: float
    converged: bool
    grad_norm: float


def _negative_log_density(params: StrictPotentialParams, y: np.ndarray):
    def fun(points: np.ndarray, rows: np.ndarray):
        tape = Tape()
        xt = tape.leaf(points)
        y_rows = np.repeat(y, len(points), axis=0)
        try:
            terms = recorded_log_density(tape, lambda v: strict_potential(params, v, y_rows), xt)
            grad = tape.grad(ops.sum(terms), [xt])[0]
        except NumericalError:
            return np.full(len(points), np.inf), np.zeros_like(points)
        return terms.value[:, 0], grad.value

    return fun


def map_point(params: StrictPotentialParams, y, x0: Optional[np.ndarray] = None,
              cfg: Optional[SampleConfig] = None, seed: int = 0, n_init_samples: int = 100) -> MapResult:
    """
    Mode of the estimated conditional density given y.

    Minimizes ½‖∇ₓG‖² − log det ∇ₓ²G with L-BFGS. Without ``x0`` the search
    starts at the mean of ``n_init_samples`` posterior draws.
    """
    cfg = cfg or SampleConfig()
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    if x0 is None:
        x0 = sample_posterior(params, y, n_init_samples, cfg, seed).x.mean(axis=0)
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    result = lbfgs.minimize(_negative_log_density(params, y), x0, tol=cfg.tol, max_iter=cfg.max_iter,
                            history=cfg.history)
    if not result.converged[0]:
        logger.warning(f"MAP search stopped with gradient norm {result.grad_norm[0]:.3e}")
    n = x0.shape[1]
    return MapResult(
        x=result.x[0],
        log_density=float(-(result.f[0] + 0.5 * n * LOG_2PI)),
        converged=bool(result.converged[0]),
        grad_norm=float(result.grad_norm[0]),
    )
