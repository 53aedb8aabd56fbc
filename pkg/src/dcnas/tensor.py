"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
inputs and a backward rule when any input requires a gradient; calling
:meth:`Tensor.backward` on a scalar builds a :class:`Tape` (the recorded
operations in topological order) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- autograd
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor on the path.

        Repeated calls add to existing gradients.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        Tape.from_root(self).replay(np.ones_like(self.data))

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation with the given backward rule.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return make_op(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return make_op(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def where(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``cond`` holds, else ``fill`` (no gradient there)."""
    cond = np.asarray(cond, dtype=bool)
    return make_op(np.where(cond, x.data, fill), (x,), lambda g: (np.where(cond, g, 0.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), backward)


# --------------------------------------------------------------- pointwise
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return make_op(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def glu(x: Tensor) -> Tensor:
    """Split the last dimension in half: ``a * sigmoid(b)``."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu needs an even last dimension, got {d}")
    h = d // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return make_op(a * s, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[...] = x[..., idx[...]]`` (gather along the last axis)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return make_op(out, (x,), backward)


# ------------------------------------------------------------ layer pieces
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gamma, beta), backward)


def conv1d_depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel convolution over the time axis with symmetric zero padding.

    ``x`` is ``[..., T, d]`` and ``kernel`` is ``[k, d]`` with ``k`` odd; the
    output keeps length ``T``. Tap ``j`` multiplies ``x[t + j - (k-1)/2]``.
    """
    k, d = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {k}")
    if x.shape[-1] != d:
        raise ShapeError(f"conv1d_depthwise: input {x.shape} vs kernel {kernel.shape}")
    pad = (k - 1) // 2
    T = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j : j + T, :] * kernel.data[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            gxp[..., j : j + T, :] += g * kernel.data[j]
            gk[j] = (g * xp[..., j : j + T, :]).sum(axis=lead)
        return gxp[..., pad : pad + T, :], gk

    return make_op(out, (x, kernel), backward)


def dropout(x: Tensor, p: float, seed: int, step: int = 0, op_id: int = 0) -> Tensor:
    """Inverted dropout with a mask keyed by ``(seed, step, op_id)``."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ConfigurationError(f"dropout probability must be < 1, got {p}")
    rng = np.random.default_rng([int(seed), int(step), int(op_id)])
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_op(weight.data[ids], (weight,), backward)


def sinusoidal_positions(length: int, d_model: int) -> Tensor:
    """Absolute sinusoidal encoding ``[length, d_model]`` (a constant)."""
    pos = np.arange(length, dtype=DTYPE)[:, None]
    i = np.arange(0, d_model, 2, dtype=DTYPE)
    freq = np.exp(-math.log(10000.0) * i / d_model)
    pe = np.zeros((length, d_model), dtype=DTYPE)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : d_model // 2]
    return Tensor(pe)
