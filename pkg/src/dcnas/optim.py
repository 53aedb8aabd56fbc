"""Adam with bias correction, and global-norm gradient clipping."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        """Apply one update from ``p.grad`` and clear the gradients."""
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"Adam.step: missing gradient for {p.name or tuple(p.shape)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{i}": m for i, m in enumerate(self.m)}
        out.update({f"v.{i}": v for i, v in enumerate(self.v)})
        out["t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.m = [np.array(state[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v.{i}"]) for i in range(len(self.params))]
        self.t = int(state["t"][0])


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm
