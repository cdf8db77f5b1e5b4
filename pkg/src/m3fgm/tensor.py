"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value the models compute is a :class:`Tensor`. Operations record the
parents that require gradients together with a closure mapping the output
gradient to parent gradients; :func:`backward` walks that DAG in reverse
topological order.

Broadcasting is limited to leading axes: after stripping leading 1s, the
shorter shape must be a suffix of the longer one.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run the enclosed block without recording a tape (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def frozen(params: Iterable["Tensor"]):
    """Temporarily mark ``params`` as constants so no gradient reaches them."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor | None, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = op
        return t

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
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no gradient path."""
        return Tensor._wrap(self.data, "detach")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Record a custom op: ``backward(g)`` returns one gradient (or None) per parent."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")
    out = Tensor._wrap(data, op)
    if grad_enabled():
        # gradient flags are captured now so later unfreezing cannot leak grads
        live = tuple(p if p.requires_grad else None for p in parents)
        if any(p is not None for p in live):
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    def strip(s):
        i = 0
        while i < len(s) and s[i] == 1:
            i += 1
        return s[i:]

    sa, sb = strip(a), strip(b)
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), backward, "mul")


def logistic(a: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(-a)) without overflow or cancellation in either tail."""
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = logistic(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_op(y, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return make_op(y, (x,), backward, "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return make_op(np.where(pos, x.data, 0.0), (x,), backward, "relu")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis; all other extents must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    if axis != -1 and axis != ts[0].ndim - 1:
        raise DimensionError("concat: only the last axis is supported")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} differ off the last axis")
    cuts = np.cumsum([t.shape[-1] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return make_op(np.concatenate([t.data for t in ts], axis=-1), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack: no inputs")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise DimensionError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    n = len(ts)

    def backward(g):
        return tuple(np.take(g, k, axis=ax) for k in range(n))

    return make_op(out, ts, backward, "stack")


def select(x, index: int, axis: int) -> Tensor:
    """``x`` indexed at a single position of ``axis`` (that axis is dropped)."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if not -x.shape[ax] <= index < x.shape[ax]:
        raise DimensionError(f"select: index {index} out of range for axis of extent {x.shape[ax]}")
    key = (slice(None),) * ax + (index,)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return make_op(x.data[key], (x,), backward, "select")


def take(x, index, axis: int) -> Tensor:
    """Gather positions ``index`` (an integer array) along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    idx = np.asarray(index, dtype=np.intp)
    n = x.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take: index out of range for axis of extent {n}")
    shape = x.shape

    def backward(g):
        gm = np.moveaxis(g, ax, 0)
        gx = np.zeros((n,) + gm.shape[1:])
        np.add.at(gx, idx, gm)
        return (np.moveaxis(gx, 0, ax).reshape(shape),)

    return make_op(np.take(x.data, idx, axis=ax), (x,), backward, "take")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {shape}") from exc

    def backward(g):
        return (g.reshape(src),)

    return make_op(out, (x,), backward, "reshape")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading axes.

    ``a`` may be 1-D, in which case it is treated as a single row.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim < 2:
        raise DimensionError(f"matmul: right operand must be at least 2-D, got {b.shape}")
    if a.ndim == 1:
        if b.ndim != 2:
            raise DimensionError(f"matmul: 1-D left operand needs a 2-D right operand, got {b.shape}")
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}") from exc
    return make_op(out, (a, b), backward, "matmul")


def where(cond, a, b) -> Tensor:
    """Elementwise choice; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return make_op(out, (a, b), backward, "where")


def segment_mean(x, src: np.ndarray, dst: np.ndarray, n_dst: int) -> Tensor:
    """Mean of source rows over directed edges ``src[e] -> dst[e]``.

    Rows live on axis -2 of ``x``. Destinations without in-edges get zeros.
    """
    x = as_tensor(x)
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    if x.ndim < 2:
        raise DimensionError("segment_mean: input must be at least 2-D")
    n_src = x.shape[-2]
    if src.size and (src.min() < 0 or src.max() >= n_src or dst.min() < 0 or dst.max() >= n_dst):
        raise DimensionError("segment_mean: edge endpoint out of range")
    deg = np.bincount(dst, minlength=n_dst).astype(np.float64)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)

    xs = np.moveaxis(x.data, -2, 0)
    acc = np.zeros((n_dst,) + xs.shape[1:])
    if src.size:
        np.add.at(acc, dst, xs[src])
    scale = inv.reshape((n_dst,) + (1,) * (acc.ndim - 1))
    out = np.moveaxis(acc * scale, 0, -2)

    def backward(g):
        gs = np.moveaxis(g, -2, 0) * scale
        gx = np.zeros((n_src,) + gs.shape[1:])
        if src.size:
            np.add.at(gx, src, gs[dst])
        return (np.moveaxis(gx, 0, -2),)

    return make_op(out, (x,), backward, "segment_mean")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.array(x.data.sum()), (x,), backward, "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    if n == 0:
        raise DimensionError("mean: empty tensor")

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return make_op(np.array(x.data.mean()), (x,), backward, "mean")


def mse(pred, target) -> Tensor:
    """Mean squared difference over all elements.

    A target that does not require gradients receives none.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    if pred.size == 0:
        raise DimensionError("mse: empty tensor")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = (2.0 * float(g) / n) * diff
        return gp, -gp

    return make_op(np.array(np.mean(diff * diff)), (pred, target), backward, "mse")


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are overwritten.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or parent is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
