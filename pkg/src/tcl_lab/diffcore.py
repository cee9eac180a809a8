"""Reverse-mode differentiation over dense float64 arrays.

Every op builds a fresh :class:`Node` holding its value and a closure that
maps the upstream gradient to one gradient per parent. The tape is rebuilt
on every training step; nothing is cached between calls to :func:`backward`.

Broadcasting is limited to size-1 operands against full arrays. Row-wise
bias addition has its own op (:func:`add_bias`) so that shape errors stay
loud everywhere else.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an op's domain (e.g. log of a non-positive value)."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


class NonFiniteError(ValueError):
    """A NaN or Inf reached an array constructor."""


def as_array(value, *, name: str = "array") -> np.ndarray:
    """Return ``value`` as a float64 ndarray, rejecting NaN and Inf."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise NonFiniteError(f"{name} contains non-finite value at index {where}")
    return arr


class Node:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None,
        name: str | None = None,
    ):
        self.value = as_array(value, name=name or op)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar; all of it routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def constant(value, name: str | None = None) -> Node:
    return Node(value, op="const", name=name)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo a size-1 broadcast
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum()) if shape else np.asarray(grad.sum())


def _binary(a, b, op: str, fn, grads) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    val = fn(a.value, b.value)
    if val.shape not in (a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        ga, gb = grads(g, av, bv)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return Node(val, (a, b), op, back)


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a, b) -> Node:
    return _binary(a, b, "add", np.add, lambda g, av, bv: (g, g))


def sub(a, b) -> Node:
    return _binary(a, b, "sub", np.subtract, lambda g, av, bv: (g, -g))


def mul(a, b) -> Node:
    return _binary(a, b, "mul", np.multiply, lambda g, av, bv: (g * bv, g * av))


def scale(a: Node, factor: float) -> Node:
    """Multiply by a Python scalar constant."""
    factor = float(factor)
    return Node(a.value * factor, (a,), "scale", lambda g: (g * factor,))


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return Node(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def relu(a: Node) -> Node:
    # subgradient at exactly 0 is 0
    mask = (a.value > 0).astype(np.float64)
    return Node(a.value * mask, (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return Node(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def log(a: Node) -> Node:
    x = a.value
    bad = np.argwhere(x <= 0)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"log of non-positive value {x[idx]!r} at index {idx}", idx)
    return Node(np.log(x), (a,), "log", lambda g: (g / x,))


def elementwise(op: str, *inputs, factor: float | None = None) -> Node:
    """Dispatch by name: add, sub, mul, tanh, relu, log, sigmoid, scalar-scale."""
    table: dict[str, Callable[..., Node]] = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "tanh": tanh,
        "relu": relu,
        "log": log,
        "sigmoid": sigmoid,
    }
    if op == "scalar-scale":
        if factor is None:
            raise ValueError("scalar-scale requires factor=")
        return scale(_lift(inputs[0]), factor)
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return Node(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def add_bias(x: Node, bias: Node) -> Node:
    """Add a length-n vector to every row of an [m, n] matrix."""
    x, bias = _lift(x), _lift(bias)
    if x.value.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: rows {x.shape} vs bias {bias.shape}")
    return Node(x.value + bias.value, (x, bias), "add_bias", lambda g: (g, g.sum(axis=0)))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    src = a.shape
    return Node(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def take(a: Node, key) -> Node:
    """Basic (slice/integer) indexing."""
    src = a.shape

    def back(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return Node(a.value[key], (a,), "take", back)


def sum_(a: Node, axis: int | tuple[int, ...] | None = None) -> Node:
    src = a.shape
    val = a.value.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return Node(val, (a,), "sum", back)


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def square(a: Node) -> Node:
    v = a.value
    return Node(v * v, (a,), "square", lambda g: (2.0 * g * v,))


def detach(a: Node) -> Node:
    """Same value, no gradient path back to ``a``."""
    return constant(a.value.copy(), name="detached")


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every ancestor.

    Gradients for this pass are computed in a scratch table first and then
    added onto the stored ``.grad`` arrays, so calling twice without zeroing
    doubles every gradient consistently.
    """
    if root.size != 1 or root.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    scratch: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = scratch.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            key = id(parent)
            if key in scratch:
                scratch[key] = scratch[key] + pg
            else:
                scratch[key] = pg
    for node in order:
        g = scratch.get(id(node))
        if g is not None:
            node.grad = node.grad + g


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class ParamStore:
    """Named leaf nodes in insertion order."""

    params: "OrderedDict[str, Node]" = field(default_factory=OrderedDict)

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = Node(value, name=name)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for node in self.params.values():
            node.zero_grad()

    def num_values(self) -> int:
        return sum(node.size for node in self.params.values())

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, node in self.params.items():
            out.add(name, node.value.copy())
        return out

    def nodes(self):
        return self.params.values()

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of every value, keyed by name."""
        return {name: node.value.copy() for name, node in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, node in self.params.items():
            new = as_array(values[name], name=name)
            if new.shape != node.shape:
                raise ShapeError(f"{name}: expected {node.shape}, got {new.shape}")
            node.value = new.copy()


# --------------------------------------------------------------------------
# finite-difference gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); values below ``floor`` compare absolutely."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[ParamStore], Node],
    params: ParamStore,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(params)`` with central differences.

    The effective step is ``(x + h) - (x - h)`` as actually represented,
    which removes the rounding of ``h`` itself from the quotient.
    """
    params.zero_grad()
    backward(f(params))
    analytic = {name: node.grad.copy() for name, node in params.items()}

    per_param: dict[str, float] = {}
    for name, node in params.items():
        base = node.value.copy()
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += step
            lo[i] -= step
            width = hi[i] - lo[i]
            vals = []
            for probe, sign in ((hi, "+"), (lo, "-")):
                node.value = probe.reshape(base.shape)
                try:
                    val = float(f(params).value)
                except NonFiniteError as exc:
                    node.value = base
                    raise NonFiniteError(
                        f"non-finite loss probing {name}[{i}] with {sign}{step}"
                    ) from exc
                if not np.isfinite(val):
                    node.value = base
                    raise NonFiniteError(f"non-finite loss probing {name}[{i}] with {sign}{step}")
                vals.append(val)
            numeric.reshape(-1)[i] = (vals[0] - vals[1]) / width
        node.value = base
        err = relative_error(analytic[name], numeric, floor)
        per_param[name] = float(err.max()) if err.size else 0.0
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(per_param, worst, tolerance)
