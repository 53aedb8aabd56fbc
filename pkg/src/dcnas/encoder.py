"""Sequence encoders: input projection + positional encoding + cells + CTC head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .losses import Batch, LossResult, LossWeights, mixed_loss
from .nn import EVAL, Context, Linear, Module, reset_op_ids
from .search_space import AlphaStore, DcCellSpec, SuperCell
from .tensor import Tensor, log_softmax, sinusoidal_positions


class Encoder(Module):
    def __init__(
        self,
        d_in: int,
        d_model: int,
        vocab: int,
        cells: Sequence[Module],
        rng: np.random.Generator,
        positional: bool = True,
    ):
        self.d_in = d_in
        self.d_model = d_model
        self.vocab = vocab
        self.positional = positional
        self.input_proj = Linear(d_in, d_model, rng)
        self.cells = list(cells)
        self.head = Linear(d_model, vocab + 1, rng)

    def forward(self, features, mask=None, ctx: Context = EVAL) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        h = self.input_proj(x)
        if self.positional:
            h = h + sinusoidal_positions(x.shape[-2], self.d_model)
        for cell in self.cells:
            h = cell(h, mask, ctx)
        return log_softmax(self.head(h), axis=-1)

    def objective(self, batch: Batch, weights: LossWeights = LossWeights(), ctx: Context = EVAL) -> LossResult:
        log_probs = self.forward(batch.features, batch.mask, ctx)
        return mixed_loss(log_probs, batch, weights)


class SearchModel(Encoder):
    """Supernet encoder; every cell reads the same AlphaStore."""

    def __init__(
        self,
        spec: DcCellSpec,
        alphas: AlphaStore,
        d_in: int,
        vocab: int,
        rng: np.random.Generator,
        n_cells: int = 1,
        ffc_half_step: bool = True,
        positional: bool = True,
    ):
        reset_op_ids()
        cells = [SuperCell(spec, alphas, rng, ffc_half_step) for _ in range(n_cells)]
        super().__init__(d_in, spec.d_model, vocab, cells, rng, positional)
        self._spec = spec
        self._alphas = alphas

    @property
    def spec(self) -> DcCellSpec:
        return self._spec

    @property
    def alphas(self) -> AlphaStore:
        return self._alphas
