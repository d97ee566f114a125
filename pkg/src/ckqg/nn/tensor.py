"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps a dense array plus the bookkeeping needed to replay the
computation backwards: parent nodes and a closure that routes the incoming
gradient to those parents. Calling ``backward()`` on a scalar loss walks the
graph in reverse topological order and accumulates ``.grad`` on every node
that requires it.

Every forward op validates that its output is finite; NaN/Inf anywhere
raises ``NumericsError`` immediately so divergence is caught at the op that
produced it, not three modules later.
"""

from __future__ import annotations

import numpy as np


class NumericsError(RuntimeError):
    """Raised when an op produces (or receives) NaN/Inf values."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes; message names both shapes."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Autodiff value node: data, optional grad, and the backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        req = any(p.requires_grad for p in parents)
        out.requires_grad = req
        if req:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._from_op(data, (a, b), backward, "matmul")


# -- elementwise nonlinearities -------------------------------------------


def tanh(x: Tensor) -> Tensor:
    x = _coerce(x)
    data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - data * data))

    return Tensor._from_op(data, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = _coerce(x)
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._from_op(out, (x,), backward, "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = _coerce(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return Tensor._from_op(data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise NumericsError("log of non-positive value")
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return Tensor._from_op(data, (x,), backward, "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); clamped entries get zero gradient."""
    x = _coerce(x)
    data = np.maximum(x.data, floor)
    keep = x.data > floor

    def backward(g):
        x._accumulate(g * keep)

    return Tensor._from_op(data, (x,), backward, "clamp_min")


# -- softmax ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Shift-invariant softmax along ``axis``.

    ``mask`` (bool, broadcastable to x.shape) marks valid positions; invalid
    positions receive exactly 0 probability and pass no gradient. Rows with
    no valid position are an error.
    """
    x = _coerce(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("softmax received non-finite input")
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not np.all(mask.any(axis=axis)):
            raise NumericsError("softmax row is fully masked")
        v = np.where(mask, v, -np.inf)
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = np.sum(e, axis=axis, keepdims=True)
    out = e / s

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        x._accumulate(out * (g - dot))

    return Tensor._from_op(out, (x,), backward, "softmax")


# -- shape manipulation ------------------------------------------------------


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(data, tuple(tensors), backward, "concat")


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis``."""
    x = _coerce(x)
    n = x.shape[axis]
    if n % sections != 0:
        raise ShapeError(f"split: axis size {n} not divisible by {sections}")
    step = n // sections
    outs = []
    for k in range(sections):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        idx = tuple(idx)
        part = x.data[idx]

        def backward(g, idx=idx):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g

        outs.append(Tensor._from_op(part.copy(), (x,), backward, "split"))
    return outs


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slabs = np.split(g, len(tensors), axis=axis)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad:
                t._accumulate(np.squeeze(slab, axis=axis))

    return Tensor._from_op(data, tuple(tensors), backward, "stack")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _coerce(x)
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._from_op(data, (x,), backward, "reshape")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    x = _coerce(x)
    data = np.swapaxes(x.data, a1, a2).copy()

    def backward(g):
        x._accumulate(np.swapaxes(g, a1, a2))

    return Tensor._from_op(data, (x,), backward, "swapaxes")


# -- reductions ---------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return Tensor._from_op(np.asarray(data), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    data = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / count, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg / count, x.shape).copy())

    return Tensor._from_op(np.asarray(data), (x,), backward, "mean")


# -- gather / scatter ----------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; duplicate ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {weight.shape[0]} rows")
    data = weight.data[ids]

    def backward(g):
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.data)
        np.add.at(weight.grad, ids, g)

    return Tensor._from_op(data, (weight,), backward, "embedding")


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs data {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ShapeError(f"gather_last: index out of range for last axis {x.shape[-1]}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        x._accumulate(gx)

    return Tensor._from_op(data, (x,), backward, "gather_last")


def gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select one time step per batch row: x[B,L,D], idx[B] -> [B,D]."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.intp)
    b = np.arange(x.shape[0])
    data = x.data[b, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[b, idx] = g
        x._accumulate(gx)

    return Tensor._from_op(data.copy(), (x,), backward, "gather_time")


def scatter_sum(weights: Tensor, ids: np.ndarray, size: int) -> Tensor:
    """Sum ``weights[b, l]`` into output bucket ``ids[b, l]`` per batch row.

    The copy-distribution primitive: attention mass on positions holding the
    same extended-vocabulary id aggregates.
    """
    w = _coerce(weights)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.shape != w.shape:
        raise ShapeError(f"scatter_sum: ids shape {ids.shape} vs weights {w.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise ShapeError(f"scatter_sum: id out of range for size {size}")
    nb = w.shape[0]
    data = np.zeros((nb, size), dtype=np.float64)
    rows = np.arange(nb)[:, None]
    np.add.at(data, (rows, ids), w.data)

    def backward(g):
        w._accumulate(g[rows, ids])

    return Tensor._from_op(data, (w,), backward, "scatter_sum")


# -- structured ops -------------------------------------------------------------


def maxout(x: Tensor) -> Tensor:
    """Pairwise max over consecutive pairs of the last axis (2k -> k)."""
    x = _coerce(x)
    n = x.shape[-1]
    if n % 2 != 0:
        raise ShapeError(f"maxout needs an even last axis, got {n}")
    pairs = x.data.reshape(x.shape[:-1] + (n // 2, 2))
    arg = np.argmax(pairs, axis=-1)
    data = np.take_along_axis(pairs, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros_like(pairs)
        np.put_along_axis(gp, arg[..., None], g[..., None], axis=-1)
        x._accumulate(gp.reshape(x.shape))

    return Tensor._from_op(data, (x,), backward, "maxout")


def cross_entropy(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of targets under a log-domain distribution.

    ``log_probs`` is [..., V]; ``targets`` indexes the last axis per leading
    position; the result averages over all leading positions.
    """
    picked = gather_last(log_probs, targets)
    return mean(mul(picked, -1.0))


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _coerce(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: active dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        x._accumulate(g * keep)

    return Tensor._from_op(x.data * keep, (x,), backward, "dropout")
