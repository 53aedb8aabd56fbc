"""Synthetic sequence tasks standing in for speech corpora.

``pattern-ctc``: every token is a contiguous run of noisy frames around a
class mean, separated by blank-class gaps, so frame labels are exact.

``planted-filter``: the label at frame ``t`` is a function of the two frames
``t - r`` and ``t + r`` with ``r = (planted_kernel - 1) / 2``. Each token is
split into a (left, right) code pair; the left code is planted at ``t - r``
and the right code at ``t + r``, so either frame alone leaves the token
ambiguous. A centred depthwise convolution needs ``planted_kernel`` taps to
see both halves, which makes that size the smallest kernel that solves the
task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .config import TaskConfig
from .errors import DataError
from .losses import BLANK, Batch, ctc_feasible


@dataclass
class Utterance:
    features: np.ndarray  # [T, d_in]
    target: np.ndarray  # token ids 1..V
    frame_labels: np.ndarray  # [T]

    @property
    def length(self) -> int:
        return len(self.features)


def class_patterns(task: TaskConfig, seed: int) -> np.ndarray:
    """Orthonormal patterns ``[d_in, d_in]``; row 0 is the blank class, row k is class k."""
    rng = np.random.default_rng([seed, 7919])
    q, _ = np.linalg.qr(rng.normal(size=(task.d_in, task.d_in)))
    return q


def check_task(task: TaskConfig) -> None:
    if task.kind == "pattern-ctc":
        longest = task.tokens_max * (task.run_max + task.gap_max) + task.gap_max
        if longest > task.t_max:
            raise DataError(f"t_max={task.t_max} too small for {task.tokens_max} tokens (need {longest})")
    else:
        reach = (task.planted_kernel - 1) // 2
        need = 2 * reach + (task.tokens_max - 1) * task.event_spacing + 3
        if need > task.t_min:
            raise DataError(f"t_min={task.t_min} too small for {task.tokens_max} events at reach {reach} (need {need})")
        if 2 * code_size(task) + 1 > task.d_in:
            raise DataError(f"d_in={task.d_in} too small for {2 * code_size(task)} code patterns")


def code_size(task: TaskConfig) -> int:
    """Values per half-code: the smallest ``m`` with ``m * m >= vocab``."""
    return int(np.ceil(np.sqrt(task.vocab) - 1e-9))


def split_token(task: TaskConfig, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pattern rows of the left and right halves of each token (rows 1..2m)."""
    m = code_size(task)
    left, right = np.divmod(tokens - 1, m)
    return 1 + left, 1 + m + right


def _pattern_ctc(task: TaskConfig, rng: np.random.Generator, patterns: np.ndarray) -> Utterance:
    L = int(rng.integers(task.tokens_min, task.tokens_max + 1))
    tokens = rng.integers(1, task.vocab + 1, size=L)
    labels: list[int] = []
    for tok in tokens:
        labels += [BLANK] * int(rng.integers(task.gap_min, task.gap_max + 1))
        labels += [int(tok)] * int(rng.integers(task.run_min, task.run_max + 1))
    labels += [BLANK] * int(rng.integers(task.gap_min, task.gap_max + 1))
    T = max(len(labels), int(rng.integers(task.t_min, task.t_max + 1)))
    labels += [BLANK] * (T - len(labels))
    frame_labels = np.array(labels, dtype=np.int64)
    feats = patterns[frame_labels] * task.amplitude + task.noise * rng.normal(size=(T, task.d_in))
    return Utterance(feats, tokens.astype(np.int64), frame_labels)


def _sample_positions(rng: np.random.Generator, n: int, lo: int, hi: int, spacing: int) -> np.ndarray:
    """``n`` sorted integers in ``[lo, hi]`` with pairwise gaps of at least ``spacing``."""
    slack = (hi - lo) - (n - 1) * spacing
    if slack < 0:
        raise DataError("not enough frames for the requested number of events")
    base = np.sort(rng.integers(0, slack + 1, size=n))
    return lo + base + spacing * np.arange(n)


def _planted_filter(task: TaskConfig, rng: np.random.Generator, patterns: np.ndarray) -> Utterance:
    reach = (task.planted_kernel - 1) // 2
    T = int(rng.integers(task.t_min, task.t_max + 1))
    L = int(rng.integers(task.tokens_min, task.tokens_max + 1))
    # label frames need a blank on both sides and both code frames inside the utterance
    label_pos = _sample_positions(rng, L, reach + 1, T - reach - 2, task.event_spacing)
    tokens = rng.integers(1, task.vocab + 1, size=L)
    feats = task.noise * rng.normal(size=(T, task.d_in))
    frame_labels = np.zeros(T, dtype=np.int64)
    frame_labels[label_pos] = tokens
    left, right = split_token(task, tokens)
    np.add.at(feats, label_pos - reach, task.amplitude * patterns[left])
    np.add.at(feats, label_pos + reach, task.amplitude * patterns[right])
    return Utterance(feats, tokens.astype(np.int64), frame_labels)


def generate_utterance(task: TaskConfig, rng: np.random.Generator, patterns: np.ndarray) -> Utterance:
    if task.kind == "pattern-ctc":
        utt = _pattern_ctc(task, rng, patterns)
    else:
        utt = _planted_filter(task, rng, patterns)
    if utt.length < 2 * len(utt.target) + 1 or not ctc_feasible(utt.length, utt.target):
        raise DataError("generator produced a CTC-infeasible utterance")
    return utt


def generate_dataset(task: TaskConfig, seed: int, n: int, stream: int = 0) -> list[Utterance]:
    check_task(task)
    patterns = class_patterns(task, seed)
    rng = np.random.default_rng([seed, 101, stream])
    return [generate_utterance(task, rng, patterns) for _ in range(n)]


def collate(utts: Sequence[Utterance]) -> Batch:
    if not utts:
        raise DataError("cannot collate an empty batch")
    T = max(u.length for u in utts)
    d = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, d))
    labels = np.zeros((len(utts), T), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.length] = u.features
        labels[i, : u.length] = u.frame_labels
    lengths = np.array([u.length for u in utts], dtype=np.int64)
    return Batch(feats, lengths, [u.target.copy() for u in utts], labels)


def generate_batch(task: TaskConfig, rng: np.random.Generator, batch_size: int, seed: int | None = None) -> Batch:
    """A fresh batch drawn with ``rng``; class patterns come from ``seed`` (default ``task.seed``)."""
    check_task(task)
    patterns = class_patterns(task, seed if seed is not None else (task.seed or 0))
    return collate([generate_utterance(task, rng, patterns) for _ in range(batch_size)])


@dataclass
class TaskData:
    train: list[Utterance]
    val: list[Utterance]


def split_dataset(task: TaskConfig, seed: int) -> TaskData:
    """Train/validation pools for bi-level search (``val_fraction`` held out)."""
    n_val = max(1, int(round(task.n_utterances * task.val_fraction)))
    n_train = task.n_utterances - n_val
    if task.kind == "planted-filter":
        return TaskData(generate_dataset(task, seed, n_train, stream=0), generate_dataset(task, seed, n_val, stream=1))
    pool = generate_dataset(task, seed, task.n_utterances, stream=0)
    return TaskData(pool[:n_train], pool[n_train:])


def epoch_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One shuffled pass; the trailing partial batch is dropped."""
    order = rng.permutation(len(utts))
    for i in range(0, len(order) - batch_size + 1, batch_size):
        yield collate([utts[j] for j in order[i : i + batch_size]])


def cycle_batches(utts: Sequence[Utterance], batch_size: int, seed: int, stream: int) -> Iterator[Batch]:
    """Endless reshuffled passes; ``batch_size`` is capped at the pool size."""
    bs = min(batch_size, len(utts))
    k = 0
    while True:
        yield from epoch_batches(utts, bs, np.random.default_rng([seed, stream, k]))
        k += 1
