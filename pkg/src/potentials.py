"""
Partially and fully input-convex networks and the strictly convex potential
built on top of them.

Parameter containers hold flat, named rank-2 arrays ("0.L_w", "gamma1", ...).
The same forward functions work on plain numpy arrays (detached evaluation)
and on tape-bound tensors (training), see :meth:`ParamSet.bind`.

Matrix orientation is (out, in); activations are rows, so a layer computes
``v @ L.T``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Dict, Iterator, List, Optional, Tuple, Type

import numpy as np

from .autodiff import Tape, Tensor, spd_logdet
from .autodiff import ops
from .autodiff.tape import as_tensor
from .errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

# softplus(0.5413) ≈ 1.0
GAMMA_INIT = (0.0, 0.0, 0.5413)
GAMMA_KEYS = ("gamma1", "gamma2", "gamma3")


def default_context_width(width: int, m: int) -> int:
    """min(w, smallest power of two ≥ m)."""
    return int(min(width, 1 << max(0, int(np.ceil(np.log2(max(m, 1)))))))


# --- dims ---------------------------------------------------------------------

@dataclass(frozen=True)
class PicnnDims:
    n: int
    m: int
    width: int
    depth: int
    context_width: Optional[int] = None

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"PICNN depth must be at least 2, got {self.depth}")
        if min(self.n, self.m, self.width) < 1:
            raise ConfigError(f"PICNN dims must be positive: n={self.n}, m={self.m}, w={self.width}")
        if self.context_width is None:
            object.__setattr__(self, "context_width", default_context_width(self.width, self.m))
        elif self.context_width < 1:
            raise ConfigError(f"context width must be positive, got {self.context_width}")

    def layer_shapes(self, k: int) -> Dict[str, Tuple[int, int]]:
        """
        Shapes of layer k; absent blocks are simply missing.

        Every block feeding the last layer has a single output row because w_K
        is a scalar. That includes L_x, which is (1, n) there and not (w, n).
        """
        K, n, w, u = self.depth, self.n, self.width, self.context_width
        if not 0 <= k < K:
            raise ConfigError(f"layer {k} outside depth {K}")
        d_in = n if k == 0 else w
        d_out = w if k < K - 1 else 1
        d_v = self.m if k == 0 else u
        shapes = {
            "L_vw": (d_out, d_v),
            "L_w": (d_out, d_in),
            "b_w": (1, d_out),
            "L_wv": (d_in, d_v),
            "b_wv": (1, d_in),
        }
        if k <= K - 2:
            shapes["L_v"] = (u, d_v)
            shapes["b_v"] = (1, u)
        if k >= 1:
            shapes["L_xv"] = (n, d_v)
            shapes["b_xv"] = (1, n)
            # the output layer is scalar, so its x-block maps n -> 1
            shapes["L_x"] = (d_out, n)
        return shapes


@dataclass(frozen=True)
class FicnnDims:
    m: int
    width: int
    depth: int

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"FICNN depth must be at least 2, got {self.depth}")
        if min(self.m, self.width) < 1:
            raise ConfigError(f"FICNN dims must be positive: m={self.m}, w={self.width}")

    def layer_shapes(self, k: int) -> Dict[str, Tuple[int, int]]:
        K, w = self.depth, self.width
        d_out = w if k < K - 1 else 1
        shapes = {"L_y": (d_out, self.m), "b": (1, d_out)}
        if k >= 1:
            shapes["L_w"] = (d_out, w)
        return shapes


# --- containers ---------------------------------------------------------------

@dataclass
class ParamSet:
    """Named weight arrays plus the dims that produced them."""

    dims: Dict[str, Any]
    arrays: Dict[str, Any] = field(default_factory=dict)

    kind: ClassVar[str] = "params"

    def __getitem__(self, key: str) -> Any:
        return self.arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def keys(self) -> List[str]:
        return list(self.arrays)

    def numpy(self) -> Dict[str, np.ndarray]:
        return {k: (v.value if isinstance(v, Tensor) else np.asarray(v)) for k, v in self.arrays.items()}

    def with_arrays(self, arrays: Dict[str, Any]) -> "ParamSet":
        return type(self)(dims=dict(self.dims), arrays=dict(arrays))

    def copy(self) -> "ParamSet":
        return self.with_arrays({k: v.copy() for k, v in self.numpy().items()})

    def bind(self, tape: Tape) -> "ParamSet":
        """Copy whose arrays are leaves of ``tape``."""
        return self.with_arrays({k: tape.leaf(v) for k, v in self.numpy().items()})

    def constrained_keys(self) -> List[str]:
        return []

    def size(self) -> int:
        return int(sum(v.size for v in self.numpy().values()))

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        a, b = self.numpy(), other.numpy()
        return a.keys() == b.keys() and all(np.allclose(a[k], b[k], rtol=0.0, atol=atol) for k in a)


@dataclass
class PicnnParams(ParamSet):
    kind: ClassVar[str] = "picnn"

    @property
    def shape_spec(self) -> PicnnDims:
        return PicnnDims(**self.dims)

    def layer(self, k: int) -> Dict[str, Any]:
        prefix = f"{k}."
        return {key[len(prefix):]: v for key, v in self.arrays.items() if key.startswith(prefix)}

    def constrained_keys(self) -> List[str]:
        return [k for k in self.arrays if k.endswith(".L_w")]


@dataclass
class StrictPotentialParams(ParamSet):
    """PICNN weights under ``picnn.`` plus the three scalar gammas."""

    kind: ClassVar[str] = "strict_potential"

    @property
    def picnn(self) -> PicnnParams:
        prefix = "picnn."
        return PicnnParams(
            dims=dict(self.dims),
            arrays={k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)},
        )

    def constrained_keys(self) -> List[str]:
        return [k for k in self.arrays if k.startswith("picnn.") and k.endswith(".L_w")]


@dataclass
class FicnnParams(ParamSet):
    """FICNN weights and gammas of the strictly convex wrapper."""

    kind: ClassVar[str] = "ficnn"

    def constrained_keys(self) -> List[str]:
        return [k for k in self.arrays if k.endswith(".L_w")]


PARAM_CLASSES: Dict[str, Type[ParamSet]] = {
    cls.kind: cls for cls in (PicnnParams, StrictPotentialParams, FicnnParams)
}


# --- initialization -----------------------------------------------------------

def _glorot(rng: np.random.Generator, shape: Tuple[int, int], constrained: bool) -> np.ndarray:
    fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    draw = rng.uniform(-a, a, size=shape)
    return np.abs(draw) if constrained else draw


def _init_layers(rng: np.random.Generator, dims, prefix: str = "") -> Dict[str, np.ndarray]:
    arrays = {}
    for k in range(dims.depth):
        for name, shape in sorted(dims.layer_shapes(k).items()):
            key = f"{prefix}{k}.{name}"
            if name.startswith("b"):
                arrays[key] = np.zeros(shape)
            else:
                arrays[key] = _glorot(rng, shape, constrained=(name == "L_w"))
    return arrays


def _gammas() -> Dict[str, np.ndarray]:
    return {key: np.full((1, 1), value) for key, value in zip(GAMMA_KEYS, GAMMA_INIT)}


def init_params(dims, seed: int, strict: bool = True) -> ParamSet:
    """
    Deterministic initialization for a PICNN or FICNN.

    Args:
        dims: PicnnDims or FicnnDims
        seed: generator seed
        strict: wrap a PICNN in the strictly convex potential (FICNNs always
            carry their gammas)

    Returns:
        StrictPotentialParams, PicnnParams or FicnnParams
    """
    rng = np.random.default_rng(seed)
    if isinstance(dims, PicnnDims):
        if not strict:
            return PicnnParams(dims=asdict(dims), arrays=_init_layers(rng, dims))
        arrays = _init_layers(rng, dims, prefix="picnn.")
        arrays.update(_gammas())
        return StrictPotentialParams(dims=asdict(dims), arrays=arrays)
    if isinstance(dims, FicnnDims):
        arrays = _init_layers(rng, dims)
        arrays.update(_gammas())
        return FicnnParams(dims=asdict(dims), arrays=arrays)
    raise ConfigError(f"cannot initialize parameters for {type(dims).__name__}")


def project_nonneg(params: ParamSet) -> ParamSet:
    """Clip the constrained blocks at zero; everything else is copied as is."""
    arrays = params.numpy()
    out = {}
    constrained = set(params.constrained_keys())
    for key, value in arrays.items():
        out[key] = np.maximum(value, 0.0) if key in constrained else value.copy()
    return params.with_arrays(out)


# --- forward passes -----------------------------------------------------------

def _check_width(op: str, t: Tensor, expected: int, label: str) -> None:
    if t.shape[1] != expected:
        raise ShapeMismatchError(op, -1, t.shape, f"{label} must have {expected} columns")


def picnn_forward(params: PicnnParams, x, y) -> Tensor:
    """
    Scalar PICNN output w_K per row; convex in x for every fixed y.

    Args:
        params: PicnnParams (numpy or tape-bound)
        x: (batch, n)
        y: (batch, m)

    Returns:
        (batch, 1)
    """
    dims = params.dims
    x, v = as_tensor(x), as_tensor(y)
    _check_width("picnn_forward", x, dims["n"], "x")
    _check_width("picnn_forward", v, dims["m"], "y")
    K = dims["depth"]
    w = x
    for k in range(K):
        p = params.layer(k)
        gate = ops.relu(ops.add(ops.matmul(v, ops.transpose(p["L_wv"])), p["b_wv"]))
        z = ops.matmul(ops.mul(w, gate), ops.transpose(ops.relu(p["L_w"])))
        z = ops.add(z, ops.add(ops.matmul(v, ops.transpose(p["L_vw"])), p["b_w"]))
        if k >= 1:
            xv = ops.add(ops.matmul(v, ops.transpose(p["L_xv"])), p["b_xv"])
            z = ops.add(z, ops.matmul(ops.mul(x, xv), ops.transpose(p["L_x"])))
        w = ops.softplus(z)
        if k <= K - 2:
            v = ops.elu(ops.add(ops.matmul(v, ops.transpose(p["L_v"])), p["b_v"]))
    return w


def _strict_coefficients(arrays: Dict[str, Any]) -> Tuple[Tensor, Tensor]:
    scale = ops.softplus(arrays["gamma1"])
    quad = ops.add(ops.relu(arrays["gamma2"]), ops.softplus(arrays["gamma3"]))
    return scale, quad


def quadratic_coefficient(params: ParamSet) -> float:
    arrays = params.numpy()
    return float(np.maximum(arrays["gamma2"], 0.0) + np.logaddexp(0.0, arrays["gamma3"]))


def strict_potential(params: StrictPotentialParams, x, y) -> Tensor:
    """G = softplus(γ1)·w_K + (relu(γ2) + softplus(γ3))·½‖x‖², one row per sample."""
    x = as_tensor(x)
    scale, quad = _strict_coefficients(params.arrays)
    w_K = picnn_forward(params.picnn, x, y)
    return ops.add(ops.mul(w_K, scale), ops.mul(ops.scale(ops.square_norm(x), 0.5), quad))


def ficnn_forward(params: FicnnParams, y) -> Tensor:
    """Scalar FICNN output per row; convex in y."""
    y = as_tensor(y)
    _check_width("ficnn_forward", y, params.dims["m"], "y")
    a = params.arrays
    s = None
    for k in range(params.dims["depth"]):
        z = ops.add(ops.matmul(y, ops.transpose(a[f"{k}.L_y"])), a[f"{k}.b"])
        if k >= 1:
            z = ops.add(z, ops.matmul(s, ops.transpose(ops.relu(a[f"{k}.L_w"]))))
        s = ops.softplus(z)
    return s


def ficnn_potential(params: FicnnParams, y) -> Tensor:
    """Strictly convex wrapper around the FICNN, same construction as the PICNN potential."""
    y = as_tensor(y)
    scale, quad = _strict_coefficients(params.arrays)
    return ops.add(ops.mul(ficnn_forward(params, y), scale),
                   ops.mul(ops.scale(ops.square_norm(y), 0.5), quad))


# --- maps -----------------------------------------------------------------------

def recorded_map(tape: Tape, potential, x: Tensor, create_graph: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Record the potential and its x-gradient on ``tape``.

    ``potential`` maps the x leaf to per-row values. Returns (values, gradient).
    """
    values = potential(x)
    grad = tape.grad(ops.sum(values), [x], create_graph=create_graph)[0]
    return values, grad


def recorded_hessian(tape: Tape, grad: Tensor, x: Tensor) -> Tensor:
    """Per-row Hessians, flattened column by column into (batch, n*n)."""
    columns = tape.hessian_columns(grad, x)
    return columns[0] if len(columns) == 1 else ops.concat(columns, axis=1)


def recorded_log_density(tape: Tape, potential, x: Tensor) -> Tensor:
    """
    Per-row ½‖∇G‖² − log det ∇²G.

    This is the negative log-likelihood of the pushforward without the
    (n/2)·ln 2π constant.
    """
    n = x.shape[1]
    _, grad = recorded_map(tape, potential, x)
    hess = recorded_hessian(tape, grad, x)
    return ops.sub(ops.scale(ops.square_norm(grad), 0.5), spd_logdet(hess, n=n))


def potential_grad_x(params: StrictPotentialParams, x, y) -> np.ndarray:
    """g⁻¹(x; y) = ∇ₓG, shape (batch, n)."""
    tape = Tape()
    xt = tape.leaf(np.asarray(x, dtype=np.float64))
    _, grad = recorded_map(tape, lambda v: strict_potential(params, v, y), xt, create_graph=False)
    return grad.value


def potential_hessian_x(params: StrictPotentialParams, x, y) -> np.ndarray:
    """∇ₓ²G assembled from n Hessian-vector products, shape (batch, n, n)."""
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x)
    _, grad = recorded_map(tape, lambda v: strict_potential(params, v, y), xt)
    columns = tape.hessian_columns(grad, xt)
    return np.stack([c.value for c in columns], axis=2)


def ficnn_grad_y(params: FicnnParams, y) -> np.ndarray:
    """h⁻¹(y) = ∇ᵧ of the strictly convex FICNN potential."""
    tape = Tape()
    yt = tape.leaf(np.asarray(y, dtype=np.float64))
    _, grad = recorded_map(tape, lambda v: ficnn_potential(params, v), yt, create_graph=False)
    return grad.value
