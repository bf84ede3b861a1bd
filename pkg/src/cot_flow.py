"""
Dynamic conditional transport: a continuous normalizing flow whose velocity
is the negative x-gradient of a scalar potential Φ(t, x; y).

    Φ(q) = aᵀ N(q) + ½‖Aᵀq‖² + bᵀq + c,   q = (t, x, y)

with N a two-layer residual network (log-cosh activation). The inverse map
integrates dp/dt = −(1/α₁)∇ₚΦ from t = 1 (data) to t = 0 (reference) with
RK4 and carries three accumulators through the same stages: the log-det ℓ,
the transport cost and the HJB residual. Training differentiates through
the discretization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import lbfgs
from .autodiff import Tape, Tensor, ops
from .autodiff.tape import as_tensor
from .config import FlowConfig, SampleConfig
from .datasets import Dataset
from .errors import ConfigError, DivergenceError, NonFiniteError, NumericalError
from .metrics import relative_sample_error
from .pcp_map import MapResult
from .potentials import ParamSet
from .records import RunRecord
from .seeding import derive_seed
from .training import LoopSettings, chunked_mean, fit

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
BOX = 1.5
MAX_RANK = 10
NETWORK_KEYS = ("a", "A0", "b0", "A1", "b1")
EMBED_PREFIX = "embed."


# --- parameters -------------------------------------------------------------------

@dataclass(frozen=True)
class PhiDims:
    n: int
    context: int
    width: int
    rank: Optional[int] = None

    def __post_init__(self):
        if self.n < 1 or self.context < 0 or self.width < 1:
            raise ConfigError(f"invalid potential dims n={self.n}, context={self.context}, w={self.width}")
        if self.rank is None:
            object.__setattr__(self, "rank", min(MAX_RANK, self.d))
        elif not 1 <= self.rank <= self.d:
            raise ConfigError(f"rank {self.rank} must lie in [1, {self.d}]")

    @property
    def d(self) -> int:
        """Length of q = (t, x, y)."""
        return self.n + self.context + 1

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        w, d = self.width, self.d
        return {
            "a": (w, 1),
            "A0": (w, d), "b0": (1, w),
            "A1": (w, w), "b1": (1, w),
            "A": (d, self.rank), "b": (1, d), "c": (1, 1),
        }


@dataclass(frozen=True)
class EmbedDims:
    m: int
    hidden: int
    out: int

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        return {
            "W1": (self.hidden, self.m), "b1": (1, self.hidden),
            "W2": (self.hidden, self.hidden), "b2": (1, self.hidden),
            "W3": (self.out, self.hidden), "b3": (1, self.out),
        }


@dataclass
class EmbedParams(ParamSet):
    """Three-layer tanh network applied to y before it enters Φ."""

    kind: ClassVar[str] = "embed"


@dataclass
class PhiParams(ParamSet):
    """
    Potential weights; embedding weights (if any) live under ``embed.``.

    dims: n, context (width of the y-features Φ sees, 0 for a marginal flow),
    width, rank, m (raw y width), embed_hidden, embed_out.
    """

    kind: ClassVar[str] = "phi"

    @property
    def phi_dims(self) -> PhiDims:
        return PhiDims(n=self.dims["n"], context=self.dims["context"], width=self.dims["width"],
                       rank=self.dims["rank"])

    @property
    def embedding(self) -> Optional[EmbedParams]:
        if not self.dims.get("embed_out"):
            return None
        arrays = {k[len(EMBED_PREFIX):]: v for k, v in self.arrays.items() if k.startswith(EMBED_PREFIX)}
        dims = {"m": self.dims["m"], "hidden": self.dims["embed_hidden"], "out": self.dims["embed_out"]}
        return EmbedParams(dims=dims, arrays=arrays)

    def constrained_keys(self) -> List[str]:
        return [k for k in NETWORK_KEYS if k in self.arrays]


def _glorot(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_phi(n: int, m: int, width: int, seed: int, rank: Optional[int] = None,
             embed: Optional[Tuple[int, int]] = None) -> PhiParams:
    """
    Fresh potential for an n-dimensional state with an m-dimensional context.

    ``embed`` = (hidden, out) adds the context embedding; Φ then sees ``out``
    context features instead of ``m``. a, b, c and all biases start at zero.
    """
    if embed is not None and m == 0:
        raise ConfigError("a context embedding needs a context (m > 0)")
    context = embed[1] if embed is not None else m
    dims = PhiDims(n=n, context=context, width=width, rank=rank)
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in dims.shapes().items():
        arrays[name] = _glorot(rng, shape) if name in ("A0", "A1", "A") else np.zeros(shape)
    meta = {"m": m, "embed_hidden": None, "embed_out": None}
    if embed is not None:
        edims = EmbedDims(m=m, hidden=embed[0], out=embed[1])
        for name, shape in edims.shapes().items():
            arrays[EMBED_PREFIX + name] = _glorot(rng, shape) if name.startswith("W") else np.zeros(shape)
        meta.update(embed_hidden=embed[0], embed_out=embed[1])
    return PhiParams(dims={**asdict(dims), **meta}, arrays=arrays)


def clamp_box(params: ParamSet, bound: float = BOX) -> ParamSet:
    """Clip the residual-network weights into [−bound, bound]."""
    arrays = params.numpy()
    constrained = set(params.constrained_keys())
    return params.with_arrays({
        k: np.clip(v, -bound, bound) if k in constrained else v.copy() for k, v in arrays.items()
    })


# --- potential --------------------------------------------------------------------

def embed_context(params: EmbedParams, y) -> Tensor:
    """W3·tanh(W2·tanh(W1·y + b1) + b2) + b3, row-wise."""
    y = as_tensor(y)
    if y.shape[1] != params.dims["m"]:
        raise ConfigError(f"embedding expects {params.dims['m']} context columns, got {y.shape[1]}")
    a = params.arrays
    h = ops.tanh(ops.add(ops.matmul(y, ops.transpose(a["W1"])), a["b1"]))
    h = ops.tanh(ops.add(ops.matmul(h, ops.transpose(a["W2"])), a["b2"]))
    return ops.add(ops.matmul(h, ops.transpose(a["W3"])), a["b3"])


def context_of(params: PhiParams, y) -> Optional[Tensor]:
    """Context features Φ sees: embedded y, raw y, or nothing for a marginal flow."""
    if params.dims["m"] == 0:
        return None
    if y is None:
        raise ConfigError(f"this potential is conditional and needs {params.dims['m']} context columns")
    embedding = params.embedding
    if embedding is not None:
        return embed_context(embedding, y)
    y = as_tensor(y)
    if y.shape[1] != params.dims["context"]:
        raise ConfigError(f"potential expects {params.dims['context']} context columns, got {y.shape[1]}")
    return y


def phi_value(params: PhiParams, q) -> Tensor:
    """Φ(q) per row, shape (batch, 1)."""
    a = params.arrays
    q = as_tensor(q)
    u0 = ops.logcosh(ops.add(ops.matmul(q, ops.transpose(a["A0"])), a["b0"]))
    h1 = ops.add(u0, ops.logcosh(ops.add(ops.matmul(u0, ops.transpose(a["A1"])), a["b1"])))
    quad = ops.scale(ops.square_norm(ops.matmul(q, a["A"])), 0.5)
    lin = ops.matmul(q, ops.transpose(a["b"]))
    return ops.add(ops.add(ops.matmul(h1, a["a"]), quad), ops.add(lin, a["c"]))


def _phi_terms(tape: Tape, params: PhiParams, t: float, p: Tensor, ctx: Optional[Tensor],
               laplacian: bool = True) -> Tuple[Tensor, Tensor, Optional[Tensor], Tensor]:
    """Φ, ∇ₚΦ, ΔₚΦ (n tangent sweeps over the recorded gradient) and ∂ₜΦ."""
    B, n = p.shape
    parts = [Tensor(np.full((B, 1), float(t))), p] + ([ctx] if ctx is not None else [])
    q = ops.concat(parts, axis=1)
    value = phi_value(params, q)
    grad_q = tape.grad(ops.sum(value), [q], create_graph=True)[0]
    grad_x = ops.cols(grad_q, 1, 1 + n)
    dt = ops.col(grad_q, 0)
    lap = None
    if laplacian:
        for j in range(n):
            e = np.zeros(q.shape)
            e[:, 1 + j] = 1.0
            column = ops.col(tape.jvp(grad_q, [q], [Tensor(e)]), 1 + j)
            lap = column if lap is None else ops.add(lap, column)
    return value, grad_x, lap, dt


@dataclass
class PhiEval:
    value: np.ndarray
    grad_x: np.ndarray
    laplacian: np.ndarray
    dt: np.ndarray


def phi_eval(params: PhiParams, t: float, x, y=None) -> PhiEval:
    """Φ(t, x; y) with its x-gradient, x-Laplacian and time derivative."""
    tape = Tape()
    p = tape.leaf(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if p.shape[1] != params.dims["n"]:
        raise ConfigError(f"potential expects {params.dims['n']} state columns, got {p.shape[1]}")
    ctx = context_of(params, y) if params.dims["m"] else None
    value, grad_x, lap, dt = _phi_terms(tape, params, t, p, ctx)
    return PhiEval(value=value.value, grad_x=grad_x.value, laplacian=lap.value, dt=dt.value)


# --- integration ------------------------------------------------------------------

Rates = Tuple[Tensor, Optional[Tensor], Optional[Tensor], Optional[Tensor]]


def _rates(tape: Tape, params: PhiParams, t: float, p: Tensor, ctx: Optional[Tensor], alpha1: float,
           accumulate: bool) -> Rates:
    _, gx, lap, dt = _phi_terms(tape, params, t, p, ctx, laplacian=accumulate)
    v = ops.scale(gx, -1.0 / alpha1)
    if not accumulate:
        return v, None, None, None
    d_ell = ops.scale(lap, -1.0 / alpha1)
    d_cost = ops.scale(ops.square_norm(v), -0.5)
    residual = ops.sub(dt, ops.scale(ops.square_norm(gx), 0.5 / alpha1))
    d_hjb = ops.neg(ops.abs(residual))
    return v, d_ell, d_cost, d_hjb


def _rate_fn(params: PhiParams, ctx, alpha1: float, tape: Optional[Tape],
             accumulate: bool) -> Callable[[float, Tensor], Rates]:
    if tape is not None:
        return lambda t, p: _rates(tape, params, t, p, ctx, alpha1, accumulate)

    def detached(t: float, p: Tensor) -> Rates:
        # a fresh tape per stage keeps evaluation memory flat
        local = Tape()
        out = _rates(local, params, t, local.leaf(p.value), ctx, alpha1, accumulate)
        return tuple(None if o is None else Tensor(o.value) for o in out)

    return detached


@dataclass
class AugmentedState:
    """
    End of an integration: position plus the three accumulators, each (batch, 1).

    Fields are tape tensors for a recorded integration and arrays otherwise.
    """

    p: Tensor
    ell: Tensor
    cost: Tensor
    hjb: Tensor
    velocities: List[np.ndarray] = field(default_factory=list)

    def numpy(self) -> "AugmentedState":
        return AugmentedState(*(as_tensor(v).value for v in (self.p, self.ell, self.cost, self.hjb)),
                              velocities=self.velocities)


def _rk4(rate: Callable[[float, Tensor], Rates], p: Tensor, t0: float, t1: float, nt: int,
         accumulate: bool, trace: bool = False) -> AugmentedState:
    if nt < 1:
        raise ConfigError(f"nt must be at least 1, got {nt}")
    h = (t1 - t0) / nt
    B = p.shape[0]
    acc = [Tensor(np.zeros((B, 1))) for _ in range(3)]
    velocities: List[np.ndarray] = []
    for k in range(nt):
        t = t0 + k * h
        k1 = rate(t, p)
        k2 = rate(t + 0.5 * h, ops.add(p, ops.scale(k1[0], 0.5 * h)))
        k3 = rate(t + 0.5 * h, ops.add(p, ops.scale(k2[0], 0.5 * h)))
        k4 = rate(t + h, ops.add(p, ops.scale(k3[0], h)))
        if trace:
            velocities.append(k1[0].value.copy())

        def combine(i: int) -> Tensor:
            s = ops.add(ops.add(k1[i], ops.scale(k2[i], 2.0)), ops.add(ops.scale(k3[i], 2.0), k4[i]))
            return ops.scale(s, h / 6.0)

        p = ops.add(p, combine(0))
        if accumulate:
            acc = [ops.add(acc[i], combine(i + 1)) for i in range(3)]
        if not np.all(np.isfinite(p.value)):
            raise NonFiniteError("RK4 integration", k, f"state left the finite range at t={t + h:.4f}")
    if trace:
        velocities.append(rate(t1, p)[0].value.copy())
    return AugmentedState(p, *acc, velocities=velocities)


def _state_tensor(tape: Optional[Tape], x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.tape is not None or tape is None else tape.leaf(x.value)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return tape.leaf(x) if tape is not None else Tensor(x)


def integrate_inverse(params: PhiParams, x, y=None, nt: int = 8, alpha1: float = 10.0,
                      tape: Optional[Tape] = None, trace: bool = False) -> AugmentedState:
    """
    Map data to the reference: RK4 from t = 1 to t = 0 in nt equal steps.

    With ``tape`` every stage is recorded there (for training or gradients
    with respect to x); without, the result is detached numpy.
    """
    p = _state_tensor(tape, x)
    if p.shape[1] != params.dims["n"]:
        raise ConfigError(f"potential expects {params.dims['n']} state columns, got {p.shape[1]}")
    ctx = context_of(params, y)
    rate = _rate_fn(params, ctx, alpha1, tape, accumulate=True)
    state = _rk4(rate, p, 1.0, 0.0, nt, accumulate=True, trace=trace)
    return state if tape is not None else state.numpy()


def sample_flow(params: PhiParams, y, z, nt: int = 8, alpha1: float = 10.0) -> np.ndarray:
    """Push reference draws z to data space: RK4 from t = 0 to t = 1."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != params.dims["n"]:
        raise ConfigError(f"potential expects {params.dims['n']} state columns, got {z.shape[1]}")
    if y is not None and params.dims["m"]:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if len(y) == 1 and len(z) > 1:
            y = np.repeat(y, len(z), axis=0)
        if len(y) != len(z):
            raise ConfigError(f"sample_flow needs one y per z row, got {len(y)} and {len(z)}")
    ctx = context_of(params, y)
    rate = _rate_fn(params, None if ctx is None else Tensor(ctx.value), alpha1, None, accumulate=False)
    return _rk4(rate, Tensor(z), 0.0, 1.0, nt, accumulate=False).p.value


# --- objectives -------------------------------------------------------------------

def _tape_of(params: ParamSet) -> Optional[Tape]:
    for value in params.arrays.values():
        if isinstance(value, Tensor) and value.tape is not None:
            return value.tape
    return None


def _flow_terms(params: PhiParams, x, y, nt: int, alpha1: float,
                tape: Optional[Tape]) -> Tuple[Tensor, AugmentedState]:
    state = integrate_inverse(params, x, y, nt=nt, alpha1=alpha1, tape=tape)
    nll = ops.sub(ops.scale(ops.square_norm(state.p), 0.5), state.ell)
    return nll, state


def cot_loss(params: PhiParams, x, y, config: FlowConfig) -> Tensor:
    """
    Mean of ½‖p(0)‖² − ℓ + α₁·cost + α₂·hjb over the batch.

    Recorded on the tape of ``params`` (or a new one) so the parameter
    gradient runs through every RK4 stage.
    """
    tape = _tape_of(params) or Tape()
    nll, state = _flow_terms(params, x, y, config.nt, config.alpha1, tape)
    total = ops.add(nll, ops.add(ops.scale(state.cost, config.alpha1), ops.scale(state.hjb, config.alpha2)))
    return ops.mean(total)


def flow_nll(params: PhiParams, x, y=None, nt: int = 8, alpha1: float = 10.0) -> np.ndarray:
    """Per-row negative log-likelihood (with the Gaussian constant) at ``nt`` steps."""
    nll, _ = _flow_terms(params, x, y, nt, alpha1, None)
    return as_tensor(nll).value[:, 0] + 0.5 * params.dims["n"] * LOG_2PI


def velocity_variance(params: PhiParams, x, y=None, nt: int = 8, alpha1: float = 10.0) -> float:
    """
    Mean over samples of the variance of the velocity along the trajectory.

    Zero means every particle moves on a straight line at constant speed.
    """
    state = integrate_inverse(params, x, y, nt=nt, alpha1=alpha1, trace=True)
    v = np.stack(state.velocities)  # (nt + 1, batch, n)
    return float(np.mean(np.sum(v.var(axis=0), axis=1)))


# --- model ------------------------------------------------------------------------

@dataclass
class FlowModel:
    """Trained potentials plus the discretization they were trained with."""

    phi_x: PhiParams
    phi_y: Optional[PhiParams] = None
    nt: int = 8
    nt_eval: Optional[int] = None
    alpha1: float = 10.0
    alpha2: float = 10.0

    kind = "cot"

    @property
    def joint(self) -> bool:
        return self.phi_y is not None

    @property
    def checkpoint_kind(self) -> str:
        return "cot-joint" if self.joint else "cot"

    @property
    def eval_steps(self) -> int:
        return self.nt_eval or self.nt

    @property
    def n(self) -> int:
        return int(self.phi_x.dims["n"])

    @property
    def m(self) -> int:
        return int(self.phi_x.dims["m"])

    def models(self) -> Dict[str, ParamSet]:
        out: Dict[str, ParamSet] = {"x": self.phi_x}
        if self.phi_y is not None:
            out["y"] = self.phi_y
        return out

    def with_models(self, models: Dict[str, ParamSet]) -> "FlowModel":
        return FlowModel(phi_x=models["x"], phi_y=models.get("y"), nt=self.nt, nt_eval=self.nt_eval,
                         alpha1=self.alpha1, alpha2=self.alpha2)

    def nll(self, x: np.ndarray, y: np.ndarray, chunk: int = 2048, nt: Optional[int] = None) -> np.ndarray:
        """Per-row NLL of x | y, or of (x, y) in joint mode."""
        nt = nt or self.eval_steps
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        out = np.empty(len(x))
        for start in range(0, len(x), chunk):
            sl = slice(start, start + chunk)
            values = flow_nll(self.phi_x, x[sl], y[sl], nt, self.alpha1)
            if self.phi_y is not None:
                values = values + flow_nll(self.phi_y, y[sl], None, nt, self.alpha1)
            out[sl] = values
        return out

    def sample(self, y: np.ndarray, seed: int, cfg: Optional[SampleConfig] = None) -> "FlowSamples":
        """One conditional draw per row of ``y``."""
        return sample_conditional(self, y, seed)


@dataclass
class FlowSamples:
    """Samples in normalized coordinates; the flow map always 'converges'."""

    x: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return np.ones(len(self.x), dtype=bool)

    @property
    def n_failed(self) -> int:
        return 0

    def denormalized(self, dataset: Dataset) -> np.ndarray:
        return dataset.denormalize_x(self.x)


def sample_conditional(model: FlowModel, Y, seed: int = 0, nt: Optional[int] = None) -> FlowSamples:
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    z = np.random.default_rng(seed).standard_normal((len(Y), model.n))
    return FlowSamples(sample_flow(model.phi_x, Y, z, nt or model.eval_steps, model.alpha1))


def sample_posterior(model: FlowModel, y, N: int, seed: int = 0, nt: Optional[int] = None) -> FlowSamples:
    """N draws of x given one conditioning vector y."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    z = np.random.default_rng(seed).standard_normal((N, model.n))
    return FlowSamples(sample_flow(model.phi_x, np.repeat(y, N, axis=0), z, nt or model.eval_steps, model.alpha1))


def sample_joint(model: FlowModel, N: int, seed: int = 0) -> Tuple[FlowSamples, FlowSamples]:
    """(y samples, x samples) from the block-triangular joint flow."""
    if model.phi_y is None:
        raise ConfigError("joint sampling needs a model trained in joint mode")
    rng = np.random.default_rng(seed)
    y = sample_flow(model.phi_y, None, rng.standard_normal((N, model.m)), model.eval_steps, model.alpha1)
    x = sample_flow(model.phi_x, y, rng.standard_normal((N, model.n)), model.eval_steps, model.alpha1)
    return FlowSamples(y), FlowSamples(x)


def nt_consistency(params: PhiParams, y, z, nt_list: Sequence[int], nt_ref: int = 32,
                   alpha1: float = 10.0) -> Dict[int, float]:
    """‖X_nt − X_ref‖_F / ‖X_ref‖_F for a common batch of reference draws."""
    reference = sample_flow(params, y, z, nt_ref, alpha1)
    errors = {}
    for nt in nt_list:
        errors[int(nt)] = relative_sample_error(sample_flow(params, y, z, nt, alpha1), reference)
        logger.debug(f"nt={nt}: relative error {errors[int(nt)]:.3e} against nt={nt_ref}")
    return errors


# --- MAP --------------------------------------------------------------------------

def map_point(model: FlowModel, y, x0: Optional[np.ndarray] = None, cfg: Optional[SampleConfig] = None,
              seed: int = 0, n_init_samples: int = 100) -> MapResult:
    """
    Mode of the estimated conditional density given y.

    The negative log-density and its x-gradient are taken through the RK4
    steps at the evaluation step count.
    """
    cfg = cfg or SampleConfig()
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    if x0 is None:
        x0 = sample_posterior(model, y, n_init_samples, seed).x.mean(axis=0)
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)

    def fun(points: np.ndarray, rows: np.ndarray):
        tape = Tape()
        xt = tape.leaf(points)
        try:
            nll, _ = _flow_terms(model.phi_x, xt, np.repeat(y, len(points), axis=0), model.eval_steps,
                                 model.alpha1, tape)
            grad = tape.grad(ops.sum(nll), [xt])[0]
        except NumericalError:
            return np.full(len(points), np.inf), np.zeros_like(points)
        return nll.value[:, 0], grad.value

    result = lbfgs.minimize(fun, x0, tol=cfg.tol, max_iter=cfg.max_iter, history=cfg.history)
    if not result.converged[0]:
        logger.warning(f"MAP search stopped with gradient norm {result.grad_norm[0]:.3e}")
    return MapResult(
        x=result.x[0],
        log_density=float(-(result.f[0] + 0.5 * model.n * LOG_2PI)),
        converged=bool(result.converged[0]),
        grad_norm=float(result.grad_norm[0]),
    )


# --- training ---------------------------------------------------------------------

def init_model(config: FlowConfig, n: int, m: int) -> FlowModel:
    embed = (config.embed_width, config.embed_out) if config.embed_width else None
    phi_x = init_phi(n, m, config.width, derive_seed(config.seed, "cot", "x"), rank=config.rank, embed=embed)
    phi_y = None
    if config.joint:
        phi_y = init_phi(m, 0, config.width, derive_seed(config.seed, "cot", "y"), rank=config.rank)
    return FlowModel(phi_x=phi_x, phi_y=phi_y, nt=config.nt, nt_eval=config.nt_eval,
                     alpha1=config.alpha1, alpha2=config.alpha2)


def _clamp_all(models: Dict[str, ParamSet], bound: float) -> Dict[str, ParamSet]:
    return {role: clamp_box(p, bound) for role, p in models.items()}


def train_flow(config: FlowConfig, dataset: Dataset, run_id: Optional[str] = None,
               model: Optional[FlowModel] = None) -> Tuple[FlowModel, RunRecord]:
    """
    Adam on the OT-regularized objective with the box clamp after every step.

    Validation uses the NLL part only, at the evaluation step count.
    """
    if model is None:
        model = init_model(config, dataset.n, dataset.m)
    elif model.n != dataset.n or model.m != dataset.m:
        raise ConfigError(f"model dims (n={model.n}, m={model.m}) do not match the dataset "
                          f"(n={dataset.n}, m={dataset.m})")
    record = RunRecord(run_id=run_id or f"cot-{config.seed}", model=model.checkpoint_kind,
                       config=config.model_dump(), seed=config.seed)

    def loss(models, x, y) -> Tensor:
        total = cot_loss(models["x"], x, y, config)
        if "y" in models:
            total = ops.add(total, cot_loss(models["y"], y, None, config))
        return total

    def validation(models, X, Y) -> float:
        candidate = model.with_models(models)
        return chunked_mean(lambda a, b: candidate.nll(a, b, chunk=config.val_batch), X, Y, config.val_batch)

    settings = LoopSettings(batch_size=config.batch_size, learning_rate=config.learning_rate,
                            epochs=config.epochs, seed=derive_seed(config.seed, "cot", "shuffle"),
                            val_interval=config.val_interval, patience=config.patience)
    try:
        best = fit(model.models(), loss, validation, dataset.train, dataset.valid, settings, record,
                   hook=lambda models: _clamp_all(models, config.clamp))
    except DivergenceError as exc:
        record.set_metric("valid_nll", record.best_valid)
        raise DivergenceError(str(exc), last_good=model.with_models(exc.last_good), record=record) from exc
    trained = model.with_models(best)
    record.set_metric("valid_nll", record.best_valid)
    return trained, record
