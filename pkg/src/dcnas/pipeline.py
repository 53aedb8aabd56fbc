"""Retraining a derived architecture and scoring it with greedy CTC decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, TaskConfig
from .data import Utterance, collate, cycle_batches, generate_dataset, split_dataset
from .derive import ArchDescriptor, StackedEncoder, build_stacked_encoder, derive_architecture
from .engine import EpochMetrics, append_csv, run_search
from .errors import ContractError, DataError, NumericError
from .losses import BLANK, LossWeights
from .nn import Context
from .optim import Adam, clip_grad_norm
from .serialization import load_arrays, save_arrays
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

EVAL_STREAM = 2
TRAIN_HEADER = ("epoch", "steps", "train_loss")


def greedy_ctc_decode(log_probs, length: int | None = None) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    n = lp.shape[0] if length is None else int(length)
    best = np.argmax(lp[:n], axis=-1)
    out = []
    prev = None
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """Total edit distance over total reference length, capped at 1."""
    total = sum(len(r) for r in refs)
    if total == 0:
        return 0.0
    errors = sum(edit_distance(list(r), list(h)) for r, h in zip(refs, hyps))
    return min(1.0, errors / total)


def decode_all(model: StackedEncoder, utts: Sequence[Utterance], batch_size: int = 32) -> list[list[int]]:
    hyps: list[list[int]] = []
    with no_grad():
        for i in range(0, len(utts), batch_size):
            batch = collate(utts[i : i + batch_size])
            lp = model.forward(batch.features, batch.mask).data
            hyps += [greedy_ctc_decode(lp[b], n) for b, n in enumerate(batch.feat_lengths)]
    return hyps


@dataclass
class EvalResult:
    ter: float
    baseline_ter: float
    n_utterances: int

    @property
    def relative_gain(self) -> float:
        return 1.0 - self.ter / self.baseline_ter if self.baseline_ter > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "ter": self.ter,
            "baseline_ter": self.baseline_ter,
            "relative_gain": self.relative_gain,
            "n_utterances": self.n_utterances,
        }


def eval_set(task: TaskConfig, seed: int) -> list[Utterance]:
    """Held-out utterances drawn from their own stream."""
    return generate_dataset(task, seed, task.eval_utterances, stream=EVAL_STREAM)


def evaluate(model: StackedEncoder, task: TaskConfig, seed: int) -> EvalResult:
    utts = eval_set(task, seed)
    refs = [u.target.tolist() for u in utts]
    hyps = decode_all(model, utts)
    # uniform log-probs argmax to blank everywhere, so the baseline emits nothing
    uniform = [greedy_ctc_decode(np.zeros((u.length, task.vocab + 1))) for u in utts]
    return EvalResult(token_error_rate(refs, hyps), token_error_rate(refs, uniform), len(utts))


def model_dims(config: RunConfig) -> dict:
    m = config.model
    return {
        "d_in": config.task.d_in,
        "d_model": m.d_model,
        "d_hidden": m.d_hidden,
        "vocab": config.task.vocab,
        "cell_final_norm": m.cell_final_norm,
        "dropout": m.dropout,
        "ffc_half_step": m.ffc_half_step,
        "positional": m.positional,
    }


@dataclass
class TrainResult:
    model: StackedEncoder
    metrics: list[EpochMetrics]
    out_dir: Path | None = None


def train_descriptor(
    config: RunConfig, desc: ArchDescriptor, out_dir: str | Path | None = None
) -> TrainResult:
    """Fresh weights for ``desc`` stacked ``train.n_layers`` times, trained on the training split."""
    tc = config.train
    model = build_stacked_encoder(desc, tc.n_layers, model_dims(config), seed=config.seed)
    weights = LossWeights(config.loss.ctc_weight, config.loss.ce_weight)
    params = model.parameters()
    opt = Adam(params, tc.lr)
    data = split_dataset(config.task, config.task_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_metrics.csv").unlink(missing_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n")
        desc.save(out / "arch.json")
    metrics = []
    step = 0
    for epoch in range(tc.epochs):
        stream = cycle_batches(data.train, tc.batch_size, config.seed, 5000 + epoch)
        losses = []
        for _ in range(tc.steps_per_epoch):
            batch = next(stream)
            ctx = Context(training=True, seed=config.seed, step=step)
            loss = model.objective(batch, weights, ctx).loss
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {step}")
            for p in params:
                p.grad = None
            loss.backward()
            if tc.grad_clip > 0:
                clip_grad_norm(params, tc.grad_clip)
            opt.step()
            losses.append(value)
            step += 1
        m = EpochMetrics(epoch, "train", len(losses), float(np.mean(losses)), float("nan"), {})
        metrics.append(m)
        log.info("train epoch %d loss=%.4f", epoch, m.train_loss)
        if out is not None:
            append_csv(out / "train_metrics.csv", TRAIN_HEADER, [[epoch, m.steps, repr(m.train_loss)]])
    if out is not None:
        save_model(out / "model", model, config)
    return TrainResult(model, metrics, out)


def save_model(path: Path, model: StackedEncoder, config: RunConfig) -> Path:
    meta = {
        "kind": "stacked-encoder",
        "descriptor": model.descriptor.to_dict(),
        "n_layers": len(model.cells),
        "dims": model_dims(config),
        "config_hash": config.config_hash(),
        "seed": config.seed,
    }
    return save_arrays(path, model.state_dict(), meta)


def load_model(path: str | Path) -> tuple[StackedEncoder, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "stacked-encoder":
        raise ContractError(f"{path} is not a trained-encoder checkpoint")
    desc = ArchDescriptor.from_dict(meta["descriptor"])
    model = build_stacked_encoder(desc, int(meta["n_layers"]), meta["dims"])
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: weights do not match the descriptor: {exc}") from exc
    return model, meta


@dataclass
class PipelineResult:
    descriptor: ArchDescriptor
    eval: EvalResult
    search_dir: Path | None
    train_dir: Path | None


def run_pipeline(config: RunConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """search -> derive -> retrain from scratch -> evaluate."""
    out = Path(out_dir) if out_dir is not None else None
    sdir = out / "search" if out is not None else None
    tdir = out / "train" if out is not None else None
    found = run_search(config, sdir)
    desc = derive_architecture(found.alphas, found.spec)
    if out is not None:
        desc.save(out / "arch.json")
    trained = train_descriptor(config, desc, tdir)
    result = evaluate(trained.model, config.task, config.task_seed)
    return PipelineResult(desc, result, sdir, tdir)
