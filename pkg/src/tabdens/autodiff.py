"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays for storage, a define-by-run
graph of closures for the backward pass.  Reductions (matmul, sum, mean,
softmax, layer norm) accumulate in float64 and round back to the operand
dtype, so float32 parameter storage keeps reproducible, order-insensitive
results at the precision that matters.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GraphError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A numpy array plus an optional gradient and graph linkage.

    Data is immutable by convention once an op has produced it; only ``grad``
    is mutated (additively) during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # ---- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __truediv__(self, other):
        return divide(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def parameter(data, dtype=np.float32) -> Tensor:
    """A leaf tensor that participates in gradient updates.

    Always copies: the optimizer mutates parameter storage in place, and that
    must never reach back into caller-owned arrays.
    """
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")
    return arr


def _result(data: np.ndarray, op: str, parents: Iterable[Tensor],
            backward: Callable | None) -> Tensor:
    _check_finite(data, op)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the un-broadcast operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(out, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    with np.errstate(over="ignore"):
        out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, "mul", (a, b), backward)


def divide(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "divide")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out, "divide", (a, b), backward)


def square(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = a.data * a.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (2.0 * a.data))

    return _result(out, "square", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (0.5 / np.sqrt(a.data)))

    return _result(out, "sqrt", (a,), backward)


# ---- activation ------------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            _accumulate(a, g * (phi + x * pdf))

    return _result(out.astype(a.dtype, copy=False), "activation", (a,), backward)


# ---- reductions (float64 accumulation) -------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}") from None
    dtype = np.result_type(a.dtype, b.dtype)
    with np.errstate(over="ignore"):
        out = np.matmul(a.data.astype(np.float64, copy=False),
                        b.data.astype(np.float64, copy=False)).astype(dtype, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        if a.requires_grad:
            ga = np.matmul(g64, np.swapaxes(b.data.astype(np.float64, copy=False), -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data.astype(np.float64, copy=False), -1, -2), g64)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _result(out, "matmul", (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype, copy=False)
    out = np.asarray(out)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out, "sum", (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype, copy=False)
    out = np.asarray(out)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _result(out, "mean", (a,), backward)


def softmax_last(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(a.dtype, copy=False)

    def backward(g):
        if a.requires_grad:
            g64 = g.astype(np.float64, copy=False)
            dot = (g64 * y64).sum(axis=-1, keepdims=True)
            _accumulate(a, y64 * (g64 - dot))

    return _result(y, "softmax-last-axis", (a,), backward)


def layer_norm_last(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if a.shape[-1] < 1:
        raise ShapeError("layer norm needs a non-empty last axis")
    x = a.data.astype(np.float64, copy=False)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat.astype(a.dtype, copy=False)

    def backward(g):
        if a.requires_grad:
            g64 = g.astype(np.float64, copy=False)
            gm = g64.mean(axis=-1, keepdims=True)
            gx = (g64 * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g64 - gm - xhat * gx))

    return _result(out, "layer-normalize-last-axis", (a,), backward)


# ---- structural ops ---------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _result(out, "concat", tensors, backward)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            _accumulate(a, buf)

    return _result(np.ascontiguousarray(out), "slice", (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked-fill: mask {mask.shape} does not broadcast to {a.shape}") from None
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(mask, 0.0, g), a.shape))

    return _result(out, "masked-fill", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _result(out, "reshape", (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return _result(out, "transpose", (a,), backward)


# ---- spec-facing dispatcher and backward ------------------------------------

_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "divide": divide,
    "activation": gelu,
    "softmax-last-axis": softmax_last,
    "layer-normalize-last-axis": layer_norm_last,
    "sum": tsum,
    "mean": tmean,
    "square": square,
    "sqrt": sqrt,
    "concat": concat,
    "slice": slice_,
    "masked-fill": masked_fill,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply one named operation to a list of input tensors.

    ``concat`` takes the whole list; ``slice`` and ``masked-fill`` take their
    extra arguments as keywords (``key``; ``mask`` and ``value``).
    """
    if kind not in _OPS:
        raise ShapeError(f"unknown op kind {kind!r}")
    fn = _OPS[kind]
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    if kind == "slice":
        return fn(inputs[0], kwargs["key"])
    if kind == "masked-fill":
        return fn(inputs[0], kwargs["mask"], kwargs["value"])
    return fn(*inputs, **kwargs)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with d(root)/d(tensor).

    Gradients accumulate additively across fan-out.  ``root`` must be scalar.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward root does not require grad")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
