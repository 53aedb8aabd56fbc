"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f() / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().item()
        flat[i] = orig - h
        down = f().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps gradients that are exactly zero in theory (e.g. a key bias
    under softmax shift invariance) from being scored on finite-difference noise.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    per_tensor: bool = True,
) -> float:
    """Worst relative error between tape and finite-difference gradients.

    With ``max_entries``, only that many randomly chosen coordinates per
    tensor are perturbed (the rest of the analytic gradient is ignored).
    With ``per_tensor=False`` the checked coordinates of all tensors are
    pooled into one vector and a single relative error is returned.
    """
    for t in tensors:
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.grad = None
    worst = 0.0
    pooled_a: list[np.ndarray] = []
    pooled_n: list[np.ndarray] = []
    rng = rng or np.random.default_rng(0)
    for t, a in zip(tensors, analytic):
        if max_entries is None or t.data.size <= max_entries:
            n = numerical_grad(f, t, h)
            worst = max(worst, relative_error(a, n))
            pooled_a.append(a.reshape(-1))
            pooled_n.append(n.reshape(-1))
            continue
        idx = rng.choice(t.data.size, size=max_entries, replace=False)
        flat = t.data.reshape(-1)
        num = np.empty(max_entries)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num[j] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(a.reshape(-1)[idx], num))
        pooled_a.append(a.reshape(-1)[idx])
        pooled_n.append(num)
    if not per_tensor:
        return relative_error(np.concatenate(pooled_a), np.concatenate(pooled_n))
    return worst
