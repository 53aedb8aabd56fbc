"""Small configs and toy bi-level problems shared by the tests."""

from __future__ import annotations

import numpy as np

from dcnas.config import load_config
from dcnas.search_space import AlphaStore
from dcnas.tensor import Tensor

TINY = {
    "model": {"d_model": 8, "d_hidden": 16, "heads": [2, 4], "kernels": [3, 5, 7]},
    "task": {
        "kind": "pattern-ctc", "vocab": 3, "d_in": 4, "t_min": 8, "t_max": 12,
        "tokens_min": 1, "tokens_max": 2, "run_min": 1, "run_max": 2, "gap_min": 1, "gap_max": 2,
        "n_utterances": 40, "eval_utterances": 20,
    },
    "search": {"max_epochs": 4, "steps_per_epoch": 3, "batch_size": 4, "freeze_epochs": 3},
    "train": {"n_layers": 1, "epochs": 1, "steps_per_epoch": 3, "batch_size": 4},
}


def tiny_config(seed=0, **sections):
    over = {k: dict(v) for k, v in TINY.items()}
    for k, v in sections.items():
        over.setdefault(k, {}).update(v)
    return load_config("desk", seed=seed, overrides=over)


class ToyProblem:
    """Scalar bi-level problem with user-supplied losses of ``(w, a)`` tensors."""

    def __init__(self, w0, a0, train_fn, val_fn):
        self.w = Tensor(np.array([float(w0)]), requires_grad=True)
        self.alphas = AlphaStore({"a": np.array([float(a0)])}, {"a": ("a",)})
        self.train_fn, self.val_fn = train_fn, val_fn

    @property
    def a(self):
        return self.alphas["a"]

    def w_params(self):
        return [self.w]

    def train_loss(self, batch, step):
        return self.train_fn(self.w, self.a).sum()

    def val_loss(self, batch, step):
        return self.val_fn(self.w, self.a).sum()
