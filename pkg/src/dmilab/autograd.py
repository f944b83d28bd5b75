"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps an immutable numpy array.  Operations on tensors
record their parents and a vector-Jacobian rule; :func:`backward` walks the
graph in reverse topological order and returns a fresh gradient map for the
trainable leaves, so repeated calls never accumulate.

Binary operations only accept identical shapes or a 0-d scalar operand.  Any
other expansion must go through :func:`broadcast_to`, whose gradient is the
matching sum-reduction.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GradientError(RuntimeError):
    pass


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; ``name`` keys
    them in the gradient map returned by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.setflags(write=False)
    out.data = data
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.vjp = vjp
    else:
        out.parents = ()
        out.vjp = None
    return out


# ---------------------------------------------------------------- elementwise

def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcast is allowed in binary ops
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains exact zeros; clamp before dividing")
    out = a.data / b.data

    def vjp(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _node(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input; apply clamp_min first")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("sqrt: non-positive input")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    return _node(np.maximum(a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def safe_log(a, floor: float = LOG_FLOOR) -> Tensor:
    return log(clamp_min(a, floor))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def einsum(subscripts: str, *operands) -> Tensor:
    """Einstein summation without repeated indices inside one operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError("einsum", *(o.shape for o in ops))
    for s, o in zip(in_subs, ops):
        if len(set(s)) != len(s) or len(s) != o.ndim:
            raise ShapeError("einsum", *(o.shape for o in ops))
    data = np.einsum(subscripts, *(o.data for o in ops), optimize=True)

    def vjp(g):
        grads = []
        for i, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [in_subs[j] for j in range(len(ops)) if j != i]
            arrays = [ops[j].data for j in range(len(ops)) if j != i]
            spec = ",".join([out_sub] + others) + "->" + s
            grads.append(np.einsum(spec, g, *arrays, optimize=True))
        return tuple(grads)

    return _node(data, ops, vjp, "einsum")


# --------------------------------------------------------------- structural

def _check_axis(op: str, a: Tensor, axis) -> None:
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"{op}(axis={axis})", a.shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Expand size-1 axes of ``a`` to ``shape`` (same rank required)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError("broadcast_to", a.shape, shape)
    expanded = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)

    def vjp(g):
        return (g.sum(axis=expanded, keepdims=True) if expanded else g,)

    return _node(np.broadcast_to(a.data, shape), (a,), vjp, "broadcast_to")


def take(a, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Select ``indices`` along ``axis`` preserving their order."""
    a = as_tensor(a)
    _check_axis("take", a, axis)
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("take: empty index subset")
    if idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]:
        raise IndexError(f"take: index out of range for axis {axis} of size {a.shape[axis]}")

    def vjp(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(np.take(a.data, idx, axis=axis), (a,), vjp, "take")


def take_rows(a, indices: Sequence[int]) -> Tensor:
    return take(a, indices, axis=0)


def take_cols(a, indices: Sequence[int]) -> Tensor:
    return take(a, indices, axis=-1)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), vjp, "softmax")


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """L2-normalize along the last axis."""
    a = as_tensor(a)
    norms = sqrt(clamp_min(tsum(a * a, axis=-1, keepdims=True), eps))
    return a / broadcast_to(norms, a.shape)


# ----------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable leaf it depends on."""
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    result: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    owners: dict[str, int] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(node.shape)
        if not node.parents:
            key = node.name if node.name is not None else f"param@{id(node):x}"
            if owners.setdefault(key, id(node)) != id(node):
                raise GradientError(f"two distinct parameters share the name {key!r}")
            result[key] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return result


def grad_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` receives a mapping of parameter name to leaf tensor and must
    return a scalar tensor.  The error for an entry is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in base.items()}
    analytic = backward(loss_fn(leaves))

    def value_at(name: str, idx: tuple, delta: float) -> float:
        arr = base[name].copy()
        arr[idx] += delta
        args = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        val = loss_fn(args).item()
        if not np.isfinite(val):
            raise GradientError(f"non-finite loss perturbing {name}{list(idx)}")
        return val

    worst = 0.0
    for name, arr in base.items():
        ga = analytic.get(name, np.zeros(arr.shape))
        for idx in np.ndindex(arr.shape):
            num = (value_at(name, idx, epsilon) - value_at(name, idx, -epsilon)) / (2.0 * epsilon)
            a = float(ga[idx])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


def parameters(named: Mapping[str, np.ndarray], trainable: bool | Iterable[str] = True) -> dict[str, Tensor]:
    """Wrap arrays as leaves; ``trainable`` may name the subset that needs grad."""
    if isinstance(trainable, bool):
        return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in named.items()}
    wanted = set(trainable)
    return {k: Tensor(v, requires_grad=k in wanted, name=k) for k, v in named.items()}
