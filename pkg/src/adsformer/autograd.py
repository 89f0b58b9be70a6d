"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable piece of the ranking stack (attention, layer norm,
pooling, cross layers, losses) is expressed with the operations here.
A tensor wraps a numpy array; each op records a closure mapping the
output gradient to one gradient per parent.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptySequenceError(ValueError):
    """A reduction that needs at least one valid position got none."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data if isinstance(data, np.ndarray) else np.array(data, dtype=DTYPE)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, tuple(axes) if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients add up across fan-out and across repeated calls; reset
    parameters with ``zero_grad`` between optimizer steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# -- elementwise arithmetic ---------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    a = _wrap(a)
    return _make(a.data ** exponent, (a,), "pow",
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(a))`` without overflow for large negative inputs."""
    a = _wrap(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), "log_sigmoid", lambda g: (g * np.exp(-np.logaddexp(0.0, a.data)),))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    a = _wrap(a)
    inside = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), (a,), "clip", lambda g: (g * inside,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    a = _wrap(a)
    factor = np.where(a.data >= 0, 1.0, slope)
    return _make(a.data * factor, (a,), "leaky_relu", lambda g: (g * factor,))


# -- shape ops ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), "matmul", _bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), "sum", _bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes",
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Tensor, index) -> Tensor:
    a = _wrap(a)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), "getitem", _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, "concat",
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(weight: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D ``weight`` (embedding lookup)."""
    weight = _wrap(weight)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"row index out of range for table with {weight.shape[0]} rows")

    def _bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[idx], (weight,), "take_rows", _bw)


# -- neural-network primitives ------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", _bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * x_hat + bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = gain.data * x_hat + bias.data

    def _bw(g):
        gx_hat = g * gain.data
        gx = inv_std * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (gx_hat * x_hat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), "layer_norm", _bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; an exact identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng stream")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def _check_mask(x: Tensor, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mask shape {m.shape} does not match positions {x.shape[:-1]}")
    return m


def global_max_pool(x: Tensor, mask=None) -> Tensor:
    """Per-feature max over unmasked positions (axis -2).

    ``x`` is ``[..., seq, d]`` and ``mask`` is ``[..., seq]``. Gradient flows to
    the first argmax when values tie.
    """
    x = _wrap(x)
    m = np.ones(x.shape[:-1], dtype=bool) if mask is None else _check_mask(x, mask)
    if not m.any(axis=-1).all():
        raise EmptySequenceError("global_max_pool got a row with every position masked")
    masked = np.where(m[..., None], x.data, -np.inf)
    arg = masked.argmax(axis=-2)
    out = np.take_along_axis(x.data, arg[..., None, :], axis=-2)[..., 0, :]

    def _bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _make(out, (x,), "global_max_pool", _bw)


def global_avg_pool(x: Tensor, mask=None) -> Tensor:
    """Mean over unmasked positions (axis -2); an all-masked row pools to zeros."""
    x = _wrap(x)
    m = np.ones(x.shape[:-1], dtype=bool) if mask is None else _check_mask(x, mask)
    weights = m.astype(DTYPE)
    counts = np.maximum(weights.sum(axis=-1, keepdims=True), 1.0)
    weights = (weights / counts)[..., None]
    out = (x.data * weights).sum(axis=-2)
    return _make(out, (x,), "global_avg_pool", lambda g: (g[..., None, :] * weights,))


def embedding_bag_mean(weight: Tensor, indices, mask) -> Tensor:
    """Masked mean of gathered rows, ``[batch, M]`` indices to ``[batch, dim]``.

    Equivalent to ``global_avg_pool(take_rows(weight, indices), mask)`` but
    never materializes the ``[batch, M, dim]`` intermediate.
    """
    from scipy import sparse

    weight = _wrap(weight)
    idx = np.asarray(indices, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if idx.shape != m.shape or idx.ndim != 2:
        raise ShapeError(f"indices {idx.shape} and mask {m.shape} must be matching 2-D arrays")
    if m.any() and (idx[m].min() < 0 or idx[m].max() >= weight.shape[0]):
        raise IndexError(f"row index out of range for table with {weight.shape[0]} rows")
    counts = np.maximum(m.sum(axis=1), 1)
    rows = np.nonzero(m)[0]
    vals = 1.0 / counts[rows]
    bag = sparse.csr_matrix((vals, (rows, idx[m])), shape=(idx.shape[0], weight.shape[0]))
    out = np.asarray(bag @ weight.data)
    return _make(out, (weight,), "embedding_bag_mean", lambda g: (np.asarray(bag.T @ g),))


def where_mask(mask, a: Tensor, fill: float) -> Tensor:
    """Keep ``a`` where ``mask`` is true, else the constant ``fill``."""
    a = _wrap(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(m, a.data, fill), (a,), "where", lambda g: (g * m,))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(a * a, axis=axis, keepdims=True) + eps)
    return a / norm
