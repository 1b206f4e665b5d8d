"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything numeric in the forecaster runs on the :class:`Tensor` type defined
here: a numpy-backed, row-major, immutable array plus an optional backward
rule linking it to the tensors it was computed from. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once, in reverse
topological order, and accumulates ``grad`` on every participating tensor
that has ``requires_grad`` set.

Design constraints honoured throughout:

* float64 only; gradient checking beats throughput at this scale,
* tensors are immutable once created (parameter updates swap in a fresh
  data array between steps, they never write in place),
* implicit broadcasting in binary ops is limited to a trailing bias vector
  or a rank-0 scalar; anything else must go through the explicit
  :func:`broadcast_to`,
* backward is deterministic: a fixed traversal order and ordered, sequential
  accumulation, so two runs over the same graph are bit-identical.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "ComputeGraph",
    "no_grad",
    "matmul",
    "softmax",
    "masked_softmax",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "exp",
    "log",
    "square",
    "clip_min",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "reshape",
    "transpose",
    "broadcast_to",
    "index_select",
    "scatter_sum",
    "narrow",
    "finite_diff_check",
]

# Flip on to validate every op output for NaN/Inf (slow; constructor inputs
# are always validated).
check_finite_results = False

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff graph.

    ``data`` is read-only. ``grad`` is populated by :meth:`backward` and has
    the same shape as ``data``. Operation records live on the output tensor:
    ``_op`` (kind), ``_parents`` (ordered inputs) and ``_backward`` (local
    gradient rule mapping the output gradient to per-parent gradients, with
    None in slots whose parent needs no gradient).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite; got NaN or Inf")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        if check_finite_results and not np.all(np.isfinite(arr)):
            raise DomainError(f"operation '{op}' produced non-finite values")
        out.data = _freeze(arr)
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        else:
            # prune the graph below constants: nothing to differentiate
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        """The underlying (read-only) array, outside the graph."""
        return self.data

    def backward(self) -> None:
        """Populate ``grad`` with d(self)/d(tensor) for every tensor in the graph.

        ``self`` must be scalar. Gradients of all participating tensors are
        reset first, so repeated calls are idempotent.
        """
        if self.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss; got shape {self.data.shape}"
            )
        graph = ComputeGraph.from_root(self)
        for node in graph.nodes:
            node.grad = None
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.data)
        for node in reversed(graph.nodes):
            if node._backward is None or node.grad is None:
                continue
            out_grad = node.grad
            parent_grads = node._backward(out_grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # Gradient rules return freshly allocated arrays except
                    # when passing out_grad through or returning a view of
                    # it; only those need a defensive copy before later
                    # in-place accumulation.
                    if pg is out_grad or pg.base is not None or not pg.flags.writeable:
                        pg = np.array(pg)
                    parent.grad = pg
                else:
                    parent.grad += pg
        for node in graph.nodes:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

    # -- operator sugar -------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


@dataclass
class ComputeGraph:
    """Topologically ordered operation records reachable from a root tensor.

    Each record is the output tensor itself, which carries its operation kind,
    ordered parent tensors and local gradient rule. Every input precedes its
    consumer in ``nodes``, and backward visits each node exactly once.
    """

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)


# -- helpers -------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    """Equal shapes, or one operand a rank-0 scalar / trailing bias vector."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ShapeError(
        f"{op} requires equal shapes or a trailing-vector/scalar operand; "
        f"got {sa} and {sb}"
    )


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return ax


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "add")
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _reduce_to(g, a.data.shape) if na else None,
            _reduce_to(g, b.data.shape) if nb else None,
        )

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "sub")
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _reduce_to(g, a.data.shape) if na else None,
            _reduce_to(-g, b.data.shape) if nb else None,
        )

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "mul")
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _reduce_to(g * b.data, a.data.shape) if na else None,
            _reduce_to(g * a.data, b.data.shape) if nb else None,
        )

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def square(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return (2.0 * x.data * g,)

    return Tensor._from_op(x.data * x.data, (x,), backward, "square")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # stable in both tails: never exponentiates a positive argument
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (out * (1.0 - out) * g,)

    return Tensor._from_op(out, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return ((1.0 - out * out) * g,)

    return Tensor._from_op(out, (x,), backward, "tanh")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    out = np.where(x.data >= 0, x.data, slope * x.data)

    def backward(g):
        return (np.where(x.data >= 0, 1.0, slope) * g,)

    return Tensor._from_op(out, (x,), backward, "leaky_relu")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (out * g,)

    return Tensor._from_op(out, (x,), backward, "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")

    def backward(g):
        return (g / x.data,)

    return Tensor._from_op(np.log(x.data), (x,), backward, "log")


def clip_min(x, lo: float) -> Tensor:
    """max(x, lo) with gradient blocked on clamped entries."""
    x = _as_tensor(x)

    def backward(g):
        return (np.where(x.data > lo, g, 0.0),)

    return Tensor._from_op(np.maximum(x.data, lo), (x,), backward, "clip_min")


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes, when present, are an elementwise batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands; got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from e
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.data.shape) if na else None
        gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.data.shape) if nb else None
        return (ga, gb)

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``; each slice sums to 1."""
    x = _as_tensor(x)
    ax = _normalize_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def masked_softmax(x, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; off-support entries are exactly 0.

    A slice whose support is empty produces an all-zero row rather than NaN.
    """
    x = _as_tensor(x)
    ax = _normalize_axis(axis, x.ndim, "masked_softmax")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    with np.errstate(invalid="ignore"):
        shift = np.where(m, x.data, -np.inf).max(axis=ax, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(x.data - shift) * m
    denom = e.sum(axis=ax, keepdims=True)
    out = e / np.where(denom == 0, 1.0, denom)

    def backward(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (x,), backward, "masked_softmax")


# -- shape manipulation --------------------------------------------------


def reduce_sum(x, axis=None) -> Tensor:
    """Sum over ``axis`` (int, tuple, or None for all); reduced axes are removed."""
    x = _as_tensor(x)
    axes = _reduction_axes(axis, x.ndim, "sum")

    def backward(g):
        return (_expand_reduced(g, x.data.shape, axes),)

    return Tensor._from_op(x.data.sum(axis=axes), (x,), backward, "sum")


def reduce_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _reduction_axes(axis, x.ndim, "mean")
    count = 1
    for ax in axes:
        count *= x.shape[ax]

    def backward(g):
        return (_expand_reduced(g, x.data.shape, axes) / count,)

    return Tensor._from_op(x.data.mean(axis=axes), (x,), backward, "mean")


def _reduction_axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_normalize_axis(ax, ndim, op) for ax in axis))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    expanded = np.expand_dims(g, axes) if axes else g
    return np.broadcast_to(expanded, shape)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must match."""
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat requires at least one tensor")
    ax = _normalize_axis(axis, parts[0].ndim, "concat")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != ax
        ):
            raise ShapeError(
                f"concat off-axis extents differ: {parts[0].shape} vs {p.shape} on axis {ax}"
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)
    needs = [p.requires_grad for p in parts]

    def backward(g):
        grads = []
        for i in range(len(parts)):
            if not needs[i]:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Tensor._from_op(out, tuple(parts), backward, "concat")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), backward, "transpose")


def broadcast_to(x, shape) -> Tensor:
    """Explicitly broadcast (prepend axes / expand size-1 axes); grad sums back."""
    x = _as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}") from e

    def backward(g):
        return (_reduce_to(g, x.data.shape),)

    return Tensor._from_op(out, (x,), backward, "broadcast_to")


def _sorted_segments(idx: np.ndarray):
    """(starts, unique) when idx is non-decreasing, else None (use add.at)."""
    if idx.size == 0 or np.any(idx[1:] < idx[:-1]):
        return None
    starts = np.flatnonzero(np.concatenate(([True], idx[1:] != idx[:-1])))
    return starts, idx[starts]


def _scatter_add(target: np.ndarray, idx: np.ndarray, values: np.ndarray, axis: int, segments) -> None:
    """target[..., idx, ...] += values, accumulating duplicates, deterministic."""
    prefix = (slice(None),) * axis
    if segments is None:
        np.add.at(target, prefix + (idx,), values)
        return
    starts, unique = segments
    if len(unique) == len(idx):
        target[prefix + (idx,)] = values
    else:
        target[prefix + (unique,)] = np.add.reduceat(values, starts, axis=axis)


def index_select(x, indices, axis: int = 0) -> Tensor:
    """Gather slices at ``indices`` along ``axis`` (duplicates allowed)."""
    x = _as_tensor(x)
    ax = _normalize_axis(axis, x.ndim, "index_select")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("index_select requires a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise ShapeError(f"index_select indices out of range for extent {x.shape[ax]}")
    segments = _sorted_segments(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        _scatter_add(gx, idx, g, ax, segments)
        return (gx,)

    return Tensor._from_op(np.take(x.data, idx, axis=ax), (x,), backward, "index_select")


def scatter_sum(x, indices, size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``x`` into ``size`` buckets along ``axis`` by index.

    Inverse-shaped counterpart of :func:`index_select`: output extent along
    ``axis`` becomes ``size`` and ``out[..., i, ...] = sum over p with
    indices[p] == i of x[..., p, ...]``.
    """
    x = _as_tensor(x)
    ax = _normalize_axis(axis, x.ndim, "scatter_sum")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (x.shape[ax],):
        raise ShapeError(
            f"scatter_sum needs one index per slice: {idx.shape} vs extent {x.shape[ax]}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"scatter_sum indices out of range for size {size}")
    out_shape = list(x.shape)
    out_shape[ax] = size
    out = np.zeros(out_shape, dtype=np.float64)
    _scatter_add(out, idx, x.data, ax, _sorted_segments(idx))

    def backward(g):
        return (np.take(g, idx, axis=ax),)

    return Tensor._from_op(out, (x,), backward, "scatter_sum")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    x = _as_tensor(x)
    ax = _normalize_axis(axis, x.ndim, "narrow")
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError(
            f"narrow range [{start}, {start + length}) exceeds extent {x.shape[ax]}"
        )
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return Tensor._from_op(x.data[sl], (x,), backward, "narrow")


# -- verification --------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Compare f's analytic gradient at x against central finite differences.

    ``f`` must be scalar-valued and deterministic. Returns the maximum over
    coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    x0 = np.array(_as_tensor(x).data, dtype=np.float64)
    probe = Tensor(x0, requires_grad=True)
    y = f(probe)
    if y.data.shape != ():
        raise ContractError("finite_diff_check requires a scalar-valued function")
    y.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            shifted = x0.copy()
            shifted.ravel()[i] = orig + h
            fp = float(f(Tensor(shifted)).data)
            shifted.ravel()[i] = orig - h
            fm = float(f(Tensor(shifted)).data)
            numeric.ravel()[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_all_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains NaN or Inf")
