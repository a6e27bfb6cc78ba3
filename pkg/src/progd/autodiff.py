"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
operands and a backward rule when at least one operand requires a gradient;
:func:`backward` walks the recorded graph in reverse topological order.

Implicit broadcasting is restricted to leading dimensions: an operand of
shape ``(3,)`` combines with ``(5, 3)`` or ``(2, 5, 3)``, but ``(5, 1)`` does
not combine with ``(5, 3)``. Use :func:`expand` to repeat along an inner axis.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "EmptyNeighborhoodError",
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "matmul",
    "elementwise",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "max_over_set",
    "segment_max",
    "layer_norm",
    "concat",
    "gather_rows",
    "scatter_rows",
    "expand",
    "set_mean",
    "cumsum",
    "smooth_l1",
    "numerical_gradient",
    "relative_error",
    "save_parameters",
    "load_parameters",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyNeighborhoodError(ValueError):
    """A max-pool was requested over an empty set."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense array with an optional differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return elementwise("mul", self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def relu(self):
        return elementwise("relu", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return _sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return _transpose(self, tuple(axes))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._freed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Recorded operations reachable from a root, operands before results."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(
            position[id(p)] < position[id(n)]
            for n in self.nodes
            for p in n._parents
            if id(p) in position
        )


def backward(root: Tensor) -> Tape:
    """Populate ``grad`` on every tensor reachable from a scalar ``root``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset them.
    The recorded graph is released afterwards, so a second call on the same
    root raises ``RuntimeError``.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._freed:
        raise RuntimeError("graph already consumed by backward; rerun the forward pass")
    if not root.requires_grad:
        raise RuntimeError("root does not depend on any tensor that requires grad")
    tape = Tape.from_root(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    for node in tape.nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._freed = True
    return tape


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} differ beyond leading dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# primitives


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply ``op`` in {add, sub, mul, relu, tanh} with leading-dim broadcast."""
    a = as_tensor(a)
    if op in ("relu", "tanh"):
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        if op == "relu":
            mask = a.data > 0
            return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")
        t = np.tanh(a.data)
        return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")
    b = as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    if op == "add":
        return _result(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")
    if op == "sub":
        return _result(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")
    if op == "mul":
        ad, bd = a.data, b.data
        return _result(
            ad * bd, (a, b),
            lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    """Matrix product of ``(..., m, k)`` with ``(k, n)`` or batched  ``(..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k = ad.shape[-1]

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _result(ad @ bd, (a, b), back, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched matmul needs equal leading dims: {a.shape} @ {b.shape}")

    def back_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), back_batched, "matmul")


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction.

    Args:
        x: input scores.
        mask: optional boolean array broadcastable to ``x``; ``False`` entries
            get zero probability. Every row must keep at least one entry.
    """
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), back, "softmax")


def log_softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


def max_over_set(xs: Sequence[Tensor]) -> Tensor:
    """Per-coordinate maximum over a set of equally shaped tensors.

    The gradient goes to the maximizing element only; ties resolve to the
    lowest position in ``xs``.
    """
    if len(xs) == 0:
        raise EmptyNeighborhoodError("max over an empty neighborhood")
    xs = [as_tensor(x) for x in xs]
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"max_over_set needs uniform shapes, got {shape} and {x.shape}")
    stacked = np.stack([x.data for x in xs])
    arg = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def back(g):
        return tuple(np.where(arg == i, g, 0.0) for i in range(len(xs)))

    return _result(out, tuple(xs), back, "max_over_set")


def segment_max(x, segments: np.ndarray, num_segments: int) -> Tensor:
    """Row-wise max of ``x`` grouped by ``segments``; empty segments give zero.

    Same tie rule as :func:`max_over_set`: the lowest row index wins.
    """
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    rows = x.shape[0]
    out = np.zeros((num_segments,) + x.shape[1:])
    if rows == 0:
        return _result(out, (x,), lambda g: (np.zeros_like(x.data),), "segment_max")
    order = np.argsort(segments, kind="stable")
    sorted_seg = segments[order]
    sorted_x = x.data[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
    present = sorted_seg[starts]
    best = np.maximum.reduceat(sorted_x, starts, axis=0)
    owner = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, rows]))
    row_ids = order.reshape((-1,) + (1,) * (x.ndim - 1))
    candidates = np.where(sorted_x == best[owner], row_ids, rows)
    arg = np.minimum.reduceat(candidates, starts, axis=0)
    out[present] = best
    cols = np.indices(arg.shape)[1:]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[(arg, *cols)] = g[present]
        return (gx,)

    return _result(out, (x,), back, "segment_max")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean and unit variance, then scale."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(0), flat_g.sum(0)

    return _result(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), back, "concat")


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]`` along axis 0 (repeats allowed)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), back, "gather_rows")


def scatter_rows(x, index: np.ndarray, num_rows: int) -> Tensor:
    """Place row ``r`` of ``x`` at ``index[r]`` of a zero array (sums on repeats)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(out, index, x.data)
    return _result(out, (x,), lambda g: (g[index],), "scatter_rows")


def expand(x, axis: int, size: int) -> Tensor:
    """Repeat a length-1 ``axis`` to ``size`` entries."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] != 1:
        raise ShapeError(f"expand needs size 1 on axis {axis}, got {x.shape}")
    out = np.repeat(x.data, size, axis=axis)
    return _result(out, (x,), lambda g: (g.sum(axis=axis, keepdims=True),), "expand")


def set_mean(x, axis: int = 0) -> Tensor:
    """Mean along ``axis`` that is bit-identical under any permutation of it.

    Values are sorted before summation, so the reduction order does not
    depend on the order of set members.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    out = np.sort(x.data, axis=axis).sum(axis=axis) / n
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _result(out, (x,), back, "set_mean")


def cumsum(x, axis: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(x.data, axis=axis), (x,), back, "cumsum")


def smooth_l1(x, beta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: ``0.5 x^2 / beta`` inside ``|x| < beta``, else ``|x| - beta/2``."""
    x = as_tensor(x)
    a = np.abs(x.data)
    inside = a < beta
    out = np.where(inside, 0.5 * x.data * x.data / beta, a - 0.5 * beta)
    slope = np.where(inside, x.data / beta, np.sign(x.data))
    return _result(out, (x,), lambda g: (g * slope,), "smooth_l1")


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.full(shape, float(np.asarray(g).reshape(-1)[0])),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), back, "sum")


def _reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def _transpose(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic(index)

    def back(g):
        gx = np.zeros(shape)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(x.data[index], dtype=np.float64), (x,), back, "getitem")


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                       entries: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x.data``.

    ``fn`` is re-evaluated under ``no_grad``; entries not listed stay ``nan``.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if entries is None else entries
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            hi = float(fn().data)
            flat[i] = old - eps
            lo = float(fn().data)
            flat[i] = old
            out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "progd-params"


def save_parameters(named: Iterable[tuple[str, Tensor]], path, meta: dict | None = None) -> None:
    """Write a JSON container of ``{name, shape, data}`` records.

    Floats are written with ``repr`` precision so loading is exact.
    """
    records = [
        {"name": name, "shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in named
    ]
    payload = {"format": CHECKPOINT_FORMAT, "version": 1, "meta": meta or {}, "params": records}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    tmp.replace(path)


def load_parameters(path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} container")
    arrays = {}
    for rec in payload["params"]:
        data = np.asarray(rec["data"], dtype=np.float64)
        arrays[rec["name"]] = data.reshape(rec["shape"])
    return arrays, payload.get("meta", {})
