"""CTC, frame-level cross-entropy, and their fixed mixture.

Blank is index 0; vocabulary tokens are ``1..V``, so log-prob tensors have a
trailing dimension of ``V + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, make_op, take_last

BLANK = 0


@dataclass
class Batch:
    features: np.ndarray  # [B, T, d_in]
    feat_lengths: np.ndarray  # [B]
    targets: list[np.ndarray]
    frame_labels: np.ndarray  # [B, T]; padded frames are 0

    @property
    def target_lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.targets], dtype=np.int64)

    @property
    def mask(self) -> np.ndarray:
        T = self.features.shape[1]
        return np.arange(T)[None, :] < self.feat_lengths[:, None]

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class LossWeights:
    ctc_weight: float = 0.7
    ce_weight: float = 0.3

    def __post_init__(self):
        if min(self.ctc_weight, self.ce_weight) < 0 or abs(self.ctc_weight + self.ce_weight - 1.0) > 1e-12:
            raise ValueError(f"loss weights must be non-negative and sum to 1: {self}")


@dataclass
class LossResult:
    loss: Tensor
    ctc: float
    ce: float
    skipped: int


def ctc_min_frames(target) -> int:
    """Frames needed to emit ``target``: one per token plus a blank between repeats."""
    target = np.asarray(target)
    repeats = int(np.sum(target[1:] == target[:-1])) if len(target) > 1 else 0
    return len(target) + repeats


def ctc_feasible(n_frames: int, target) -> bool:
    return n_frames >= ctc_min_frames(target)


def _expand(target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(len(ext), dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def ctc_loss_batch(log_probs: Tensor, lengths, targets) -> Tensor:
    """Per-utterance ``-log p(target | log_probs)`` as a ``[B]`` tensor.

    Forward (alpha) and backward (beta) recursions run in log space over the
    blank-interleaved label sequence. Infeasible utterances get ``+inf`` and
    no gradient.
    """
    lp = log_probs.data
    if lp.ndim != 3:
        raise ShapeError(f"ctc_loss_batch expects [B, T, V+1], got {lp.shape}")
    B, Tmax, C = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    targets = [np.asarray(t, dtype=np.int64) for t in targets]
    if len(targets) != B or lengths.shape != (B,):
        raise ShapeError("ctc_loss_batch: batch size mismatch between log-probs, lengths and targets")
    for t in targets:
        if len(t) and (t.min() < 1 or t.max() >= C):
            raise ShapeError(f"target ids must lie in 1..{C - 1}, got {t}")
    if np.any(lengths < 1) or np.any(lengths > Tmax):
        raise ShapeError(f"input lengths must lie in 1..{Tmax}")

    S = max(2 * len(t) + 1 for t in targets)
    ext = np.zeros((B, S), dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    valid = np.zeros((B, S), dtype=bool)
    S_b = np.empty(B, dtype=np.int64)
    for b, t in enumerate(targets):
        e, k = _expand(t)
        ext[b, : len(e)] = e
        skip[b, : len(e)] = k
        valid[b, : len(e)] = True
        S_b[b] = len(e)
    feasible = np.array([ctc_feasible(int(n), t) for n, t in zip(lengths, targets)])

    neg_inf = -np.inf
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, Tmax, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, neg_inf)  # [B, T, S]
    skip_t = np.where(skip, 0.0, neg_inf)

    with np.errstate(invalid="ignore"):
        la = np.full((Tmax, B, S), neg_inf)
        la[0, :, 0] = emit[:, 0, 0]
        la[0, :, 1] = np.where(S_b > 1, emit[:, 0, 1], neg_inf) if S > 1 else neg_inf
        for t in range(1, Tmax):
            prev = la[t - 1]
            a = prev
            a1 = np.concatenate([np.full((B, 1), neg_inf), prev[:, :-1]], axis=1)
            a2 = np.concatenate([np.full((B, 2), neg_inf), prev[:, :-2]], axis=1)[:, :S] + skip_t
            la[t] = np.logaddexp(np.logaddexp(a, a1), a2) + emit[:, t]

        last = la[lengths - 1, np.arange(B)]  # [B, S]
        end1 = last[np.arange(B), S_b - 1]
        end2 = np.where(S_b > 1, last[np.arange(B), np.maximum(S_b - 2, 0)], neg_inf)
        log_p = np.logaddexp(end1, end2)

        # beta excludes the emission at its own frame
        lb = np.full((Tmax, B, S), neg_inf)
        init = np.full((B, S), neg_inf)
        init[np.arange(B), S_b - 1] = 0.0
        init[np.arange(B)[S_b > 1], (S_b - 2)[S_b > 1]] = 0.0
        nxt = np.full((B, S), neg_inf)
        for t in range(Tmax - 1, -1, -1):
            if t < Tmax - 1:
                c = nxt + emit[:, t + 1]
                c1 = np.concatenate([c[:, 1:], np.full((B, 1), neg_inf)], axis=1)
                c2 = np.concatenate([c[:, 2:] + skip_t[:, 2:], np.full((B, 2), neg_inf)], axis=1)[:, :S]
                rec = np.logaddexp(np.logaddexp(c, c1), c2)
            else:
                rec = np.full((B, S), neg_inf)
            here = (lengths - 1 == t)[:, None]
            before = (t < lengths - 1)[:, None]
            lb[t] = np.where(here, init, np.where(before, rec, neg_inf))
            nxt = lb[t]

    loss = np.where(feasible, -log_p, np.inf)

    def backward(g):
        occ = np.exp(la + lb - np.where(feasible, log_p, 0.0)[None, :, None])  # [T, B, S]
        occ = np.where(feasible[None, :, None] & valid[None], occ, 0.0)
        occ = np.nan_to_num(occ, nan=0.0, posinf=0.0)
        grad = np.zeros_like(lp)
        occ_bts = occ.transpose(1, 0, 2)
        bi = np.broadcast_to(np.arange(B)[:, None, None], occ_bts.shape)
        ti = np.broadcast_to(np.arange(Tmax)[None, :, None], occ_bts.shape)
        ki = np.broadcast_to(ext[:, None, :], occ_bts.shape)
        np.add.at(grad, (bi, ti, ki), -occ_bts)
        gw = np.where(feasible, g, 0.0)
        return (grad * gw[:, None, None],)

    return make_op(loss, (log_probs,), backward)


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """Scalar CTC loss for one utterance ``[T, V+1]``; ``+inf`` when infeasible."""
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss expects [T, V+1], got {log_probs.shape}")
    T = log_probs.shape[0]
    batched = log_probs.reshape(1, *log_probs.shape)
    return ctc_loss_batch(batched, [T], [target]).reshape(())


def frame_ce_batch(log_probs: Tensor, frame_labels, lengths) -> Tensor:
    """Per-utterance mean negative log-likelihood over valid frames, ``[B]``."""
    labels = np.asarray(frame_labels, dtype=np.int64)
    B, T, C = log_probs.shape
    if labels.shape != (B, T):
        raise ShapeError(f"frame labels {labels.shape} vs log-probs {log_probs.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    mask = np.arange(T)[None, :] < lengths[:, None]
    if np.any((labels < 0) | (labels >= C)):
        raise DataError(f"frame label outside 0..{C - 1}")
    picked = take_last(log_probs, labels)  # [B, T]
    w = mask / lengths[:, None].astype(np.float64)
    return -(picked * w).sum(axis=1)


def frame_ce_loss(log_probs: Tensor, frame_labels, length: int | None = None) -> Tensor:
    T = log_probs.shape[0]
    n = T if length is None else int(length)
    labels = np.asarray(frame_labels, dtype=np.int64)
    padded = np.zeros(T, dtype=np.int64)
    padded[: len(labels)] = labels[:T]
    return frame_ce_batch(log_probs.reshape(1, *log_probs.shape), padded[None], [n]).reshape(())


def mix(ctc, ce, weights: LossWeights = LossWeights()):
    return ctc * weights.ctc_weight + ce * weights.ce_weight


def mixed_loss(log_probs: Tensor, batch: Batch, weights: LossWeights = LossWeights()) -> LossResult:
    """``ctc_weight * mean CTC + ce_weight * mean CE`` over CTC-feasible utterances."""
    feasible = np.array(
        [ctc_feasible(int(n), t) for n, t in zip(batch.feat_lengths, batch.targets)], dtype=bool
    )
    if not feasible.any():
        raise DataError("every utterance in the batch is CTC-infeasible")
    idx = np.flatnonzero(feasible)
    lp = log_probs if feasible.all() else log_probs[idx]
    lengths = batch.feat_lengths[idx]
    targets = [batch.targets[i] for i in idx]
    n = float(len(idx))
    parts = []
    ctc_val = ce_val = 0.0
    if weights.ctc_weight > 0:
        ctc = ctc_loss_batch(lp, lengths, targets).sum() * (1.0 / n)
        ctc_val = ctc.item()
        parts.append(ctc * weights.ctc_weight)
    if weights.ce_weight > 0:
        ce = frame_ce_batch(lp, batch.frame_labels[idx], lengths).sum() * (1.0 / n)
        ce_val = ce.item()
        parts.append(ce * weights.ce_weight)
    loss = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return LossResult(loss=loss, ctc=ctc_val, ce=ce_val, skipped=len(batch) - len(idx))
