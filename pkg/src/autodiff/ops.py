"""
The closed set of differentiable primitives.

Each primitive supplies ``forward`` on numpy arrays, ``vjp`` (reverse rule)
and ``jvp`` (tangent rule). Both rules are written with the functional
wrappers at the bottom of this module, so they are recorded on the tape
whenever it is recording and can themselves be differentiated.

Arrays are rank-2 with rows as samples. Binary elementwise primitives
broadcast a length-1 axis against the other operand; nothing beyond rank-2
broadcasting is supported.
"""

from __future__ import annotations

from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..errors import NonFiniteError, ShapeMismatchError
from .tape import Tensor, TensorLike, as_tensor

_LN2 = float(np.log(2.0))


class Primitive:
    name = "primitive"
    first_order_only = False

    def forward(self, *values: np.ndarray, **attrs: Any) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, out: Tensor, attrs: dict, g: Tensor, parents: List[Tensor],
            needs: List[bool]) -> List[Optional[Tensor]]:
        raise NotImplementedError

    def jvp(self, out: Tensor, attrs: dict, tangents: List[Optional[Tensor]],
            parents: List[Tensor]) -> Optional[Tensor]:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"<{self.name}>"


def apply(prim: Primitive, inputs: Sequence[TensorLike], **attrs: Any) -> Tensor:
    ts = [as_tensor(x) for x in inputs]
    tape = next((t.tape for t in ts if t.tape is not None), None)
    try:
        value = prim.forward(*(t.value for t in ts), **attrs)
    except ValueError as exc:
        node = len(tape) if tape is not None else -1
        raise ShapeMismatchError(prim.name, node, tuple(t.shape for t in ts), str(exc)) from exc
    if tape is not None and tape.recording:
        return tape.record(prim, ts, value, attrs)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"'{prim.name}'", -1, "detached evaluation")
    return Tensor(value)


# --- structural helpers -----------------------------------------------------

def sum_to(x: Tensor, shape: Tuple[int, int]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    if x.shape == tuple(shape):
        return x
    if shape[0] == 1 and x.shape[0] != 1:
        x = sum(x, axis=0)
    if shape[1] == 1 and x.shape[1] != 1:
        x = sum(x, axis=1)
    return x


def _fill(t: Optional[Tensor], shape: Tuple[int, int]) -> Optional[Tensor]:
    if t is None or t.shape == tuple(shape):
        return t
    return broadcast_to(t, shape)


def _full(rng: Optional[Tuple[int, int]], size: int) -> Tuple[int, int]:
    return (0, size) if rng is None else (int(rng[0]), int(rng[1]))


# --- linear primitives ------------------------------------------------------

class Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, out, attrs, g, parents, needs):
        a, b = parents
        return [sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None]

    def jvp(self, out, attrs, tangents, parents):
        ta, tb = (_fill(t, out.shape) for t in tangents)
        if ta is None:
            return tb
        if tb is None:
            return ta
        return add(ta, tb)


class Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, out, attrs, g, parents, needs):
        a, b = parents
        return [sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None]

    def jvp(self, out, attrs, tangents, parents):
        a, b = parents
        ta, tb = tangents
        terms = []
        if ta is not None:
            terms.append(mul(ta, b))
        if tb is not None:
            terms.append(mul(a, tb))
        result = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
        return _fill(result, out.shape)


class Scale(Primitive):
    name = "scale"

    def forward(self, a, c):
        return a * c

    def vjp(self, out, attrs, g, parents, needs):
        return [scale(g, attrs["c"])]

    def jvp(self, out, attrs, tangents, parents):
        return scale(tangents[0], attrs["c"])


class MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"inner dimensions {a.shape[1]} and {b.shape[0]} differ")
        return a @ b

    def vjp(self, out, attrs, g, parents, needs):
        a, b = parents
        return [matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None]

    def jvp(self, out, attrs, tangents, parents):
        a, b = parents
        ta, tb = tangents
        if ta is None:
            return matmul(a, tb)
        if tb is None:
            return matmul(ta, b)
        return add(matmul(ta, b), matmul(a, tb))


class Transpose(Primitive):
    name = "transpose"

    def forward(self, a):
        return a.T.copy()

    def vjp(self, out, attrs, g, parents, needs):
        return [transpose(g)]

    def jvp(self, out, attrs, tangents, parents):
        return transpose(tangents[0])


class Sum(Primitive):
    name = "sum"

    def forward(self, a, axis=None):
        if axis is None:
            return np.sum(a).reshape(1, 1)
        return np.sum(a, axis=axis, keepdims=True)

    def vjp(self, out, attrs, g, parents, needs):
        return [broadcast_to(g, parents[0].shape)]

    def jvp(self, out, attrs, tangents, parents):
        return sum(tangents[0], axis=attrs.get("axis"))


class BroadcastTo(Primitive):
    name = "broadcast_to"

    def forward(self, a, shape):
        return np.broadcast_to(a, tuple(shape)).copy()

    def vjp(self, out, attrs, g, parents, needs):
        return [sum_to(g, parents[0].shape)]

    def jvp(self, out, attrs, tangents, parents):
        return broadcast_to(tangents[0], attrs["shape"])


class Concat(Primitive):
    name = "concat"

    def forward(self, *values, axis=1):
        return np.concatenate(values, axis=axis)

    def vjp(self, out, attrs, g, parents, needs):
        axis = attrs.get("axis", 1)
        grads: List[Optional[Tensor]] = []
        start = 0
        for p, need in zip(parents, needs):
            size = p.shape[axis]
            if need:
                rng = (start, start + size)
                grads.append(slice_(g, rows=rng) if axis == 0 else slice_(g, cols=rng))
            else:
                grads.append(None)
            start += size
        return grads

    def jvp(self, out, attrs, tangents, parents):
        filled = [t if t is not None else Tensor(np.zeros_like(p.value))
                  for t, p in zip(tangents, parents)]
        return concat(filled, axis=attrs.get("axis", 1))


class Slice(Primitive):
    name = "slice"

    def forward(self, a, rows=None, cols=None):
        r0, r1 = _full(rows, a.shape[0])
        c0, c1 = _full(cols, a.shape[1])
        if not (0 <= r0 <= r1 <= a.shape[0] and 0 <= c0 <= c1 <= a.shape[1]):
            raise ValueError(f"window rows={rows} cols={cols} outside {a.shape}")
        return a[r0:r1, c0:c1].copy()

    def vjp(self, out, attrs, g, parents, needs):
        return [embed(g, parents[0].shape, rows=attrs.get("rows"), cols=attrs.get("cols"))]

    def jvp(self, out, attrs, tangents, parents):
        return slice_(tangents[0], rows=attrs.get("rows"), cols=attrs.get("cols"))


class Embed(Primitive):
    name = "embed"

    def forward(self, a, shape, rows=None, cols=None):
        z = np.zeros(tuple(shape))
        r0, r1 = _full(rows, shape[0])
        c0, c1 = _full(cols, shape[1])
        z[r0:r1, c0:c1] = a
        return z

    def vjp(self, out, attrs, g, parents, needs):
        return [slice_(g, rows=attrs.get("rows"), cols=attrs.get("cols"))]

    def jvp(self, out, attrs, tangents, parents):
        return embed(tangents[0], attrs["shape"], rows=attrs.get("rows"), cols=attrs.get("cols"))


# --- elementwise nonlinearities ---------------------------------------------

class _Elementwise(Primitive):
    def derivative(self, out: Tensor, a: Tensor) -> Tensor:
        raise NotImplementedError

    def vjp(self, out, attrs, g, parents, needs):
        return [mul(g, self.derivative(out, parents[0]))]

    def jvp(self, out, attrs, tangents, parents):
        return mul(tangents[0], self.derivative(out, parents[0]))


class Softplus(_Elementwise):
    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def derivative(self, out, a):
        return sigmoid(a)


class Sigmoid(_Elementwise):
    name = "sigmoid"

    def forward(self, a):
        return expit(a)

    def derivative(self, out, a):
        return mul(out, 1.0 - out)


class Relu(_Elementwise):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def derivative(self, out, a):
        return step(a)


class Step(Primitive):
    """Heaviside step; its derivative is zero almost everywhere."""

    name = "step"

    def forward(self, a):
        return (a > 0.0).astype(np.float64)

    def vjp(self, out, attrs, g, parents, needs):
        return [None]

    def jvp(self, out, attrs, tangents, parents):
        return None


class Elu(_Elementwise):
    name = "elu"

    def forward(self, a):
        return np.where(a > 0.0, a, np.expm1(np.minimum(a, 0.0)))

    def derivative(self, out, a):
        s = step(a)
        return add(s, mul(1.0 - s, exp(neg(relu(neg(a))))))


class Exp(_Elementwise):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def derivative(self, out, a):
        return out


class Tanh(_Elementwise):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def derivative(self, out, a):
        return 1.0 - mul(out, out)


class LogCosh(_Elementwise):
    name = "logcosh"

    def forward(self, a):
        m = np.abs(a)
        return m + np.log1p(np.exp(-2.0 * m)) - _LN2

    def derivative(self, out, a):
        return tanh(a)


class Abs(_Elementwise):
    name = "abs"

    def forward(self, a):
        return np.abs(a)

    def derivative(self, out, a):
        return add(step(a), neg(step(neg(a))))


ADD, MUL, SCALE, MATMUL, TRANSPOSE = Add(), Mul(), Scale(), MatMul(), Transpose()
SUM, BROADCAST, CONCAT, SLICE, EMBED = Sum(), BroadcastTo(), Concat(), Slice(), Embed()
SOFTPLUS, SIGMOID, RELU, STEP, ELU = Softplus(), Sigmoid(), Relu(), Step(), Elu()
EXP, TANH, LOGCOSH, ABS = Exp(), Tanh(), LogCosh(), Abs()


# --- functional wrappers ----------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    return apply(ADD, [a, b])


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return apply(MUL, [a, b])


def scale(a: TensorLike, c: float) -> Tensor:
    return apply(SCALE, [a], c=float(c))


def neg(a: TensorLike) -> Tensor:
    return scale(a, -1.0)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return add(a, neg(b))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return apply(MATMUL, [a, b])


def transpose(a: TensorLike) -> Tensor:
    return apply(TRANSPOSE, [a])


def sum(a: TensorLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return apply(SUM, [a], axis=axis)


def broadcast_to(a: TensorLike, shape: Tuple[int, int]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply(BROADCAST, [a], shape=tuple(shape))


def concat(items: Sequence[TensorLike], axis: int = 1) -> Tensor:
    return apply(CONCAT, list(items), axis=axis)


def slice_(a: TensorLike, rows: Optional[Tuple[int, int]] = None,
           cols: Optional[Tuple[int, int]] = None) -> Tensor:
    return apply(SLICE, [a], rows=rows, cols=cols)


def cols(a: TensorLike, start: int, stop: int) -> Tensor:
    return slice_(a, cols=(start, stop))


def col(a: TensorLike, j: int) -> Tensor:
    return slice_(a, cols=(j, j + 1))


def embed(a: TensorLike, shape: Tuple[int, int], rows: Optional[Tuple[int, int]] = None,
          cols: Optional[Tuple[int, int]] = None) -> Tensor:
    return apply(EMBED, [a], shape=tuple(shape), rows=rows, cols=cols)


def softplus(a: TensorLike) -> Tensor:
    return apply(SOFTPLUS, [a])


def sigmoid(a: TensorLike) -> Tensor:
    return apply(SIGMOID, [a])


def relu(a: TensorLike) -> Tensor:
    return apply(RELU, [a])


def step(a: TensorLike) -> Tensor:
    return apply(STEP, [a])


def elu(a: TensorLike) -> Tensor:
    return apply(ELU, [a])


def exp(a: TensorLike) -> Tensor:
    return apply(EXP, [a])


def tanh(a: TensorLike) -> Tensor:
    return apply(TANH, [a])


def logcosh(a: TensorLike) -> Tensor:
    return apply(LOGCOSH, [a])


def abs(a: TensorLike) -> Tensor:  # noqa: A001
    return apply(ABS, [a])


def square_norm(a: TensorLike) -> Tensor:
    """Row-wise ‖a‖², shape (rows, 1)."""
    return sum(mul(a, a), axis=1)


def mean(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return scale(sum(a), 1.0 / a.value.size)
