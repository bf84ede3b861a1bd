"""
Append-only tape (the computation graph) and the Tensor handle.

Every operation on an attached Tensor appends one node to the tape that
owns it. Parents always precede children, so a reverse sweep over node
indices is a valid topological order for backward, and a forward sweep is
valid for tangent propagation.

Backward rules and tangent rules are written with the same differentiable
primitives as the forward pass. With ``create_graph=True`` the adjoint
computation is itself recorded, which is what makes forward-over-reverse
Hessian-vector products (and gradients of losses built from them) possible.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import AutodiffUsageError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class Node:
    op: Any                       # Primitive, None for leaves
    parents: Tuple[int, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None


class Tensor:
    """
    Dense rank-2 float64 array, optionally attached to a tape.

    A detached Tensor (``tape is None``) behaves as a constant.
    """

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100

    def __init__(self, value: Any, tape: Optional["Tape"] = None, index: Optional[int] = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeMismatchError("tensor", -1, arr.shape, "rank must be at most 2")
        self.value = arr
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        where = f"node={self.index}" if self.attached else "detached"
        return f"Tensor(shape={self.shape}, {where})"

    # --- operators (implemented in ops) ---------------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(other))

    def __rsub__(self, other):
        from . import ops
        return ops.add(other, ops.neg(self))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops
        if not np.isscalar(other):
            raise AutodiffUsageError("division is only supported by scalars")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def sum(self, axis: Optional[int] = None):
        from . import ops
        return ops.sum(self, axis=axis)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """
    The Graph: an append-only list of primitive applications.

    A tape is single-use and single-owner; build one per batch evaluation.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: List[Node] = []
        self.adjoints: Dict[int, Any] = {}
        self.recording = True
        self.check_finite = check_finite
        self._names: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # --- construction ---------------------------------------------------

    def leaf(self, value: Any, name: Optional[str] = None) -> Tensor:
        t = Tensor(value)
        index = len(self.nodes)
        self.nodes.append(Node(op=None, parents=(), value=t.value, name=name))
        if name is not None:
            self._names[name] = index
        return Tensor(t.value, self, index)

    def record(self, op: Any, inputs: Sequence[Tensor], value: np.ndarray,
               attrs: Optional[Dict[str, Any]] = None) -> Tensor:
        index = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"'{op.name}'", index, f"output shape {value.shape}")
        parents = []
        for t in inputs:
            if t.tape is None:
                # constants enter the graph as unnamed leaves
                parents.append(self.leaf(t.value).index)
            elif t.tape is not self:
                raise AutodiffUsageError(f"'{op.name}' mixes tensors from different tapes")
            else:
                parents.append(t.index)
        self.nodes.append(Node(op=op, parents=tuple(parents), value=value, attrs=attrs or {}))
        return Tensor(value, self, index)

    def tensor(self, index: int) -> Tensor:
        return Tensor(self.nodes[index].value, self, index)

    @contextmanager
    def recording_as(self, flag: bool) -> Iterator[None]:
        previous = self.recording
        self.recording = flag
        try:
            yield
        finally:
            self.recording = previous

    # --- evaluation -----------------------------------------------------

    def evaluate(self, fn: Callable[..., Tensor], **inputs: Any) -> Tensor:
        """
        Bind named inputs as leaves, run ``fn`` on them and return the root.

        Intermediate values stay cached on the tape for backward.
        """
        leaves = {name: self.leaf(value, name=name) for name, value in inputs.items()}
        root = fn(**leaves)
        if not isinstance(root, Tensor) or root.tape is not self:
            raise AutodiffUsageError("evaluate: the function must return a tensor recorded on this tape")
        return root

    # --- reverse mode ---------------------------------------------------

    def _depends_on(self, stop: int, sources: Sequence[int]) -> np.ndarray:
        dep = np.zeros(stop + 1, dtype=bool)
        for s in sources:
            if s <= stop:
                dep[s] = True
        first = min(sources) if sources else stop + 1
        for i in range(first, stop + 1):
            if dep[i]:
                continue
            node = self.nodes[i]
            if node.op is not None and any(dep[p] for p in node.parents):
                dep[i] = True
        return dep

    def grad(self, root: Tensor, wrt: Sequence[Tensor], seed: Optional[TensorLike] = None,
             create_graph: bool = False) -> List[Tensor]:
        """
        Adjoints of ``root`` with respect to each tensor in ``wrt``.

        ``wrt`` may name any node (leaf or intermediate). Missing dependencies
        yield zero tensors of the matching shape.
        """
        if root.tape is not self or root.index is None:
            raise AutodiffUsageError("backward called before evaluate: root is not on this tape")
        for w in wrt:
            if w.tape is not self:
                raise AutodiffUsageError("gradient requested for a tensor that is not on this tape")

        if seed is None:
            seed_t = Tensor(np.ones_like(root.value))
        else:
            seed_t = as_tensor(seed)
            if seed_t.shape != root.shape:
                raise ShapeMismatchError("backward", root.index, (seed_t.shape, root.shape),
                                         "seed shape must match the root")

        targets = [w.index for w in wrt]
        dep = self._depends_on(root.index, targets)
        adj: Dict[int, Tensor] = {root.index: seed_t}

        with self.recording_as(create_graph):
            # nothing below the earliest target can reach a target
            for i in range(root.index, min(targets, default=0) - 1, -1):
                a = adj.get(i)
                if a is None or not dep[i]:
                    continue
                node = self.nodes[i]
                if node.op is None:
                    continue
                if create_graph and getattr(node.op, "first_order_only", False):
                    raise AutodiffUsageError(
                        f"'{node.op.name}' at node {i} does not support differentiating its adjoint"
                    )
                needs = [bool(dep[p]) for p in node.parents]
                parents = [self.tensor(p) for p in node.parents]
                out = self.tensor(i)
                contributions = node.op.vjp(out, node.attrs, a, parents, needs)
                for p, g, need in zip(node.parents, contributions, needs):
                    if g is None or not need:
                        continue
                    adj[p] = adj[p] + g if p in adj else g

        self.adjoints = adj
        result = []
        for w in wrt:
            g = adj.get(w.index)
            result.append(g if g is not None else Tensor(np.zeros_like(w.value)))
        return result

    def backward(self, root: Tensor, seed: Optional[TensorLike] = None,
                 create_graph: bool = False) -> Dict[str, np.ndarray]:
        """Gradients of ``root`` with respect to every named leaf."""
        names = sorted(self._names.items(), key=lambda kv: kv[1])
        wrt = [self.tensor(index) for _, index in names]
        grads = self.grad(root, wrt, seed=seed, create_graph=create_graph)
        return {name: g.value for (name, _), g in zip(names, grads)}

    # --- forward mode ---------------------------------------------------

    def jvp(self, output: Tensor, wrt: Sequence[Tensor], tangents: Sequence[TensorLike]) -> Tensor:
        """
        Tangent of ``output`` along ``tangents`` placed on the ``wrt`` nodes.

        The propagation is recorded, so the result can be differentiated
        again with respect to anything upstream (parameters in particular).
        """
        if output.tape is not self:
            raise AutodiffUsageError("jvp: output is not on this tape")
        tang: Dict[int, Tensor] = {}
        for w, t in zip(wrt, tangents):
            t = as_tensor(t)
            if t.shape != w.shape:
                raise ShapeMismatchError("jvp", w.index, (t.shape, w.shape), "tangent must match its primal")
            tang[w.index] = t
        if not tang:
            return Tensor(np.zeros_like(output.value))

        start = min(tang)
        with self.recording_as(True):
            for i in range(start, output.index + 1):
                node = self.nodes[i]
                if node.op is None or i in tang:
                    continue
                pt = [tang.get(p) for p in node.parents]
                if all(t is None for t in pt):
                    continue
                if getattr(node.op, "first_order_only", False):
                    raise AutodiffUsageError(
                        f"'{node.op.name}' at node {i} does not support tangent propagation"
                    )
                parents = [self.tensor(p) for p in node.parents]
                t = node.op.jvp(self.tensor(i), node.attrs, pt, parents)
                if t is not None:
                    tang[i] = t
        result = tang.get(output.index)
        return result if result is not None else Tensor(np.zeros_like(output.value))

    def hvp(self, root: Tensor, x: Tensor, v: TensorLike) -> Tensor:
        """(∇²root)(x)·v by forward-mode differentiation of the reverse-mode gradient."""
        if root.shape != (1, 1):
            raise AutodiffUsageError(f"hvp needs a scalar root, got shape {root.shape}")
        g = self.grad(root, [x], create_graph=True)[0]
        return self.jvp(g, [x], [v])

    def hessian_columns(self, gradient: Tensor, x: Tensor, columns: Optional[Sequence[int]] = None) -> List[Tensor]:
        """
        Row-batched Hessian columns from an already recorded gradient.

        ``gradient`` has the shape of ``x`` (batch, n) and row b holds the
        gradient of sample b, so the tangent along the j-th unit direction
        gives the j-th Hessian column of every sample at once.
        """
        n = x.shape[1]
        cols = []
        for j in range(n) if columns is None else columns:
            e = np.zeros_like(x.value)
            e[:, j] = 1.0
            cols.append(self.jvp(gradient, [x], [Tensor(e)]))
        return cols


def evaluate(fn: Callable[..., Tensor], inputs: Mapping[str, Any], tape: Optional[Tape] = None) -> Tuple[Tape, Tensor]:
    tape = tape or Tape()
    return tape, tape.evaluate(fn, **dict(inputs))


def backward(tape: Tape, root: Tensor, seed: Optional[TensorLike] = None) -> Dict[str, np.ndarray]:
    return tape.backward(root, seed=seed)


def hvp(fn: Callable[[Tensor], Tensor], x: Any, v: Any) -> np.ndarray:
    """Hessian-vector product of a scalar function of one input."""
    tape = Tape()
    xt = tape.leaf(x, name="x")
    root = fn(xt)
    return tape.hvp(root, xt, v).value
