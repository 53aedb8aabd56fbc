"""Conformer node operations: macaron/plain feed-forward, self-attention, convolution.

All blocks are pre-norm residual units mapping ``[..., T, d]`` to the same shape.
``mask`` is a boolean ``[B, T]`` (or ``[T]``) array marking valid frames.
"""

from __future__ import annotations

import numpy as np

from .nn import EVAL, Context, LayerNorm, Linear, Module, next_op_id, param
from .errors import ConfigurationError, ShapeError
from .tensor import (
    Tensor,
    conv1d_depthwise,
    dropout,
    glu,
    softmax,
    swish,
    where,
)

KERNEL_MENU = (15, 23, 31)
HEAD_MENU = (2, 4, 8)


def _check_dim(x: Tensor, d_model: int, block: str) -> None:
    if x.shape[-1] != d_model:
        raise ShapeError(f"{block}: last dim {x.shape[-1]} != d_model {d_model}")


def _frame_mask(mask, x: Tensor) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mask shape {m.shape} does not match frames {x.shape[:-1]}")
    return m


class Identity(Module):
    tag = "identity"

    def __call__(self, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
        return x


class FeedForwardModule(Module):
    """``y = x + s * W2(swish(W1(LN(x))))`` with ``s = 0.5`` for the macaron half step."""

    def __init__(
        self,
        d_model: int,
        d_hidden: int,
        rng: np.random.Generator,
        half_step: bool = True,
        dropout: float = 0.0,
    ):
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.half_step = half_step
        self.p_drop = dropout
        self.norm = LayerNorm(d_model)
        self.w1 = Linear(d_model, d_hidden, rng)
        self.w2 = Linear(d_hidden, d_model, rng)
        self._op_id = next_op_id()

    @property
    def tag(self) -> str:
        return "ff_half" if self.half_step else "ff"

    def __call__(self, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
        _check_dim(x, self.d_model, "feed-forward")
        h = self.w2(swish(self.w1(self.norm(x))))
        if ctx.training:
            h = dropout(h, self.p_drop, ctx.seed, ctx.step, self._op_id)
        return x + h * (0.5 if self.half_step else 1.0)


class MhsaModule(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if n_heads <= 0 or d_model % n_heads:
            raise ConfigurationError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.p_drop = dropout
        self.norm = LayerNorm(d_model)
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self._op_id = next_op_id()
        self.last_attention: np.ndarray | None = None

    @property
    def tag(self) -> str:
        return f"h{self.n_heads}"

    def _split(self, t: Tensor, B: int, T: int) -> Tensor:
        dh = self.d_model // self.n_heads
        return t.reshape(B, T, self.n_heads, dh).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
        _check_dim(x, self.d_model, "self-attention")
        m = _frame_mask(mask, x)
        squeeze = x.ndim == 2
        xb = x.reshape(1, *x.shape) if squeeze else x
        mb = None if m is None else (m[None] if squeeze else m)
        B, T, d = xb.shape
        h = self.norm(xb)
        q = self._split(self.wq(h), B, T)
        k = self._split(self.wk(h), B, T)
        v = self._split(self.wv(h), B, T)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self.n_heads))
        if mb is not None:
            scores = where(mb[:, None, None, :], scores, -np.inf)
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx_v = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        out = self.wo(ctx_v)
        if ctx.training:
            out = dropout(out, self.p_drop, ctx.seed, ctx.step, self._op_id)
        y = xb + out
        if mb is not None:
            y = y * mb[..., None].astype(np.float64)
        return y.reshape(*x.shape) if squeeze else y


class ConvModule(Module):
    """``y = x + PW2(swish(LN(DW(GLU(PW1(LN(x)))))))``; padded frames are zeroed before DW."""

    def __init__(self, d_model: int, kernel_size: int, rng: np.random.Generator, dropout: float = 0.0):
        if kernel_size <= 0 or kernel_size % 2 == 0:
            raise ConfigurationError(f"conv kernel size must be odd and positive, got {kernel_size}")
        self.d_model = d_model
        self.kernel_size = kernel_size
        self.p_drop = dropout
        self.norm = LayerNorm(d_model)
        self.pw1 = Linear(d_model, 2 * d_model, rng)
        bound = 1.0 / np.sqrt(kernel_size)
        self.dw_kernel = param(rng.uniform(-bound, bound, size=(kernel_size, d_model)))
        self.dw_bias = param(np.zeros(d_model))
        self.dw_norm = LayerNorm(d_model)
        self.pw2 = Linear(d_model, d_model, rng)
        self._op_id = next_op_id()

    @property
    def tag(self) -> str:
        return f"k{self.kernel_size}"

    def __call__(self, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
        _check_dim(x, self.d_model, "convolution")
        m = _frame_mask(mask, x)
        h = glu(self.pw1(self.norm(x)))
        if m is not None:
            h = h * m[..., None].astype(np.float64)
        h = conv1d_depthwise(h, self.dw_kernel) + self.dw_bias
        h = self.pw2(swish(self.dw_norm(h)))
        if ctx.training:
            h = dropout(h, self.p_drop, ctx.seed, ctx.step, self._op_id)
        return x + h
