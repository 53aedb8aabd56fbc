"""Parameter containers: a tiny Module tree with hierarchical names."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor, layer_norm


@dataclass
class Context:
    """Per-forward settings. ``training`` enables dropout keyed by ``(seed, step)``."""

    training: bool = False
    seed: int = 0
    step: int = 0


EVAL = Context()


class Module:
    """Base class. Parameters are ``Tensor`` attributes with ``requires_grad``.

    Attributes whose name starts with ``_`` are not traversed, which keeps
    shared objects such as an AlphaStore out of the weight set.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{getattr(item, 'tag', i)}.")

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{getattr(item, 'tag', i)}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


_op_counter = 0


def next_op_id() -> int:
    """Stable id for dropout sites; reset by :func:`reset_op_ids` at model build."""
    global _op_counter
    _op_counter += 1
    return _op_counter


def reset_op_ids() -> None:
    global _op_counter
    _op_counter = 0


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
