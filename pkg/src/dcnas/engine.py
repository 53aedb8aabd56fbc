"""Bi-level search: alternating Adam updates of weights ``w`` and architecture ``alpha``.

For the first ``e_w`` epochs ``alpha`` is frozen and only ``w`` trains. After
that each step takes one ``alpha`` update on a validation batch and one ``w``
update on a training batch. The ``alpha`` gradient is first order by default
(``xi = 0``); with ``xi > 0`` it includes the unrolled-step correction with a
finite-difference Hessian-vector product.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np

from .config import RunConfig
from .data import cycle_batches, epoch_batches, split_dataset
from .encoder import SearchModel
from .errors import ContractError, NumericError
from .losses import Batch, LossWeights
from .nn import Context
from .optim import Adam, clip_grad_norm
from .search_space import AlphaStore, DcCellSpec, build_dc_cell
from .serialization import load_arrays, save_arrays
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TRAJECTORY_HEADER = ("epoch", "edge_id", "candidate", "weight")


class Problem(Protocol):
    """What the engine needs from a model: weights, logits, and the two losses."""

    alphas: AlphaStore

    def w_params(self) -> list[Tensor]: ...

    def train_loss(self, batch, step: int) -> Tensor: ...

    def val_loss(self, batch, step: int) -> Tensor: ...


class SupernetProblem:
    def __init__(self, model: SearchModel, weights: LossWeights, alpha_loss: str = "mixed", seed: int = 0):
        self.model = model
        self.alphas = model.alphas
        self.weights = weights
        self.alpha_weights = weights if alpha_loss == "mixed" else LossWeights(1.0, 0.0)
        self.seed = seed
        self.last = None

    def w_params(self) -> list[Tensor]:
        return self.model.parameters()

    def _loss(self, batch: Batch, step: int, weights: LossWeights) -> Tensor:
        ctx = Context(training=True, seed=self.seed, step=step)
        self.last = self.model.objective(batch, weights, ctx)
        return self.last.loss

    def train_loss(self, batch: Batch, step: int) -> Tensor:
        return self._loss(batch, step, self.weights)

    def val_loss(self, batch: Batch, step: int) -> Tensor:
        return self._loss(batch, step, self.alpha_weights)


@dataclass
class SearchState:
    problem: Problem
    opt_w: Adam
    opt_alpha: Adam
    e_w: int = 3
    xi: float = 0.0
    grad_clip: float = 5.0
    epoch: int = 0
    step: int = 0
    frozen_alpha_calls: int = 0

    @classmethod
    def create(
        cls,
        problem: Problem,
        lr_w: float = 3e-4,
        lr_alpha: float = 2e-4,
        e_w: int = 3,
        xi: float = 0.0,
        grad_clip: float = 5.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> "SearchState":
        opt_w = Adam(problem.w_params(), lr_w, *betas, eps)
        opt_alpha = Adam(problem.alphas.parameters(), lr_alpha, *betas, eps)
        return cls(problem, opt_w, opt_alpha, e_w=e_w, xi=xi, grad_clip=grad_clip)

    @property
    def alphas(self) -> AlphaStore:
        return self.problem.alphas


def _check_finite(loss: Tensor, what: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} loss: {value}")
    return value


def _zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def w_step(state: SearchState, batch) -> float:
    """One Adam step of ``w`` on a training batch; ``alpha`` is untouched."""
    problem = state.problem
    loss = problem.train_loss(batch, state.step)
    value = _check_finite(loss, "training")
    w = problem.w_params()
    _zero(w)
    loss.backward()
    if state.grad_clip > 0:
        clip_grad_norm(w, state.grad_clip)
    state.opt_w.step()
    problem.alphas.zero_grad()
    return value


def alpha_gradients(problem: Problem, batch, step: int, which: str = "val") -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss value plus gradients w.r.t. alpha and w (gradients are cleared afterwards)."""
    alphas, w = problem.alphas.parameters(), problem.w_params()
    _zero(alphas)
    _zero(w)
    loss = problem.val_loss(batch, step) if which == "val" else problem.train_loss(batch, step)
    value = _check_finite(loss, which)
    loss.backward()
    ga = [np.zeros_like(a.data) if a.grad is None else a.grad for a in alphas]
    gw = [np.zeros_like(p.data) if p.grad is None else p.grad for p in w]
    _zero(alphas)
    _zero(w)
    return value, ga, gw


def second_order_alpha_grad(state: SearchState, train_batch, val_batch) -> list[np.ndarray]:
    """Unrolled architecture gradient.

    ``grad_a L_val(w', a) - xi * H_{a,w} L_train(w, a) . grad_w' L_val(w', a)``
    with ``w' = w - xi * grad_w L_train(w, a)``. The mixed second derivative
    times ``v`` is ``(grad_a L_train(w + r v) - grad_a L_train(w - r v)) / 2r``
    with ``r = 0.01 / ||v||``.
    """
    problem, xi, step = state.problem, state.xi, state.step
    w = problem.w_params()
    if xi == 0.0:
        return alpha_gradients(problem, val_batch, step, "val")[1]
    w0 = [p.data for p in w]
    try:
        _, _, g_train = alpha_gradients(problem, train_batch, step, "train")
        for p, d, g in zip(w, w0, g_train):
            p.data = d - xi * g
        _, d_alpha, v = alpha_gradients(problem, val_batch, step, "val")
        norm = float(np.sqrt(sum(float((x * x).sum()) for x in v)))
        if norm == 0.0:
            return d_alpha
        r = 0.01 / norm
        for p, d, vi in zip(w, w0, v):
            p.data = d + r * vi
        _, g_plus, _ = alpha_gradients(problem, train_batch, step, "train")
        for p, d, vi in zip(w, w0, v):
            p.data = d - r * vi
        _, g_minus, _ = alpha_gradients(problem, train_batch, step, "train")
    finally:
        for p, d in zip(w, w0):
            p.data = d
    return [da - xi * (gp - gm) / (2.0 * r) for da, gp, gm in zip(d_alpha, g_plus, g_minus)]


def first_order_alpha_step(state: SearchState, val_batch) -> float | None:
    """Adam step on ``alpha`` from ``grad_a L_val(w, a)``; ``w`` is held fixed."""
    if state.alphas.frozen:
        state.frozen_alpha_calls += 1
        return None
    value, ga, _ = alpha_gradients(state.problem, val_batch, state.step, "val")
    for a, g in zip(state.alphas.parameters(), ga):
        a.grad = g
    state.opt_alpha.step()
    return value


def alpha_step(state: SearchState, val_batch, train_batch=None) -> float | None:
    if state.xi == 0.0 or train_batch is None:
        return first_order_alpha_step(state, val_batch)
    if state.alphas.frozen:
        state.frozen_alpha_calls += 1
        return None
    grads = second_order_alpha_grad(state, train_batch, val_batch)
    for a, g in zip(state.alphas.parameters(), grads):
        a.grad = g
    state.opt_alpha.step()
    return None


# ------------------------------------------------------------- trajectory
@dataclass
class AlphaTrajectory:
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def sample(self, epoch: int, alphas: AlphaStore) -> list[tuple[int, str, str, float]]:
        new = []
        for edge in alphas:
            for cand, w in zip(alphas.candidates[edge], alphas.weights(edge)):
                new.append((epoch, edge, cand, float(w)))
        self.rows.extend(new)
        return new

    def epochs(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def weights(self, epoch: int, edge: str) -> dict[str, float]:
        return {c: w for e, ed, c, w in self.rows if e == epoch and ed == edge}

    def series(self, edge: str, candidate: str) -> list[float]:
        return [w for _, ed, c, w in self.rows if ed == edge and c == candidate]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(TRAJECTORY_HEADER)
            wr.writerows(_fmt_row(r) for r in self.rows)

    @classmethod
    def from_csv(cls, path: str | Path) -> "AlphaTrajectory":
        with open(path, newline="") as f:
            rd = csv.reader(f)
            header = tuple(next(rd))
            if header != TRAJECTORY_HEADER:
                raise ValueError(f"unexpected trajectory header {header}")
            return cls([(int(e), ed, c, float(w)) for e, ed, c, w in rd])


def _fmt_row(r):
    return (r[0], r[1], r[2], repr(r[3]))


def append_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        wr = csv.writer(f)
        if new:
            wr.writerow(header)
        wr.writerows(rows)


# ------------------------------------------------------------------ epochs
@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    steps: int
    train_loss: float
    val_loss: float
    alpha_entropy: dict[str, float]
    truncated: bool = False
    alpha_digest: str = ""

    def row(self, edges: Sequence[str]) -> list:
        return [
            self.epoch,
            self.phase,
            self.steps,
            repr(self.train_loss),
            repr(self.val_loss),
            self.alpha_digest,
            *[repr(self.alpha_entropy[e]) for e in edges],
        ]


def metrics_header(edges: Sequence[str]) -> list[str]:
    return ["epoch", "phase", "steps", "train_loss", "val_loss", "alpha_sha256", *[f"entropy:{e}" for e in edges]]


def alpha_digest(alphas: AlphaStore) -> str:
    return hashlib.sha256(alphas.serialize()).hexdigest()


def evaluate_loss(problem: Problem, batches: Sequence) -> float:
    if not batches:
        return float("nan")
    with no_grad():
        return float(np.mean([problem.val_loss(b, 0).item() for b in batches]))


def search_epoch(
    state: SearchState,
    train_stream: Iterator,
    val_stream: Iterator,
    steps: int,
    trajectory: AlphaTrajectory | None = None,
    val_eval: Sequence | None = None,
) -> EpochMetrics:
    """One epoch of the search routine (freeze phase or alternating phase)."""
    warmup = state.epoch < state.e_w
    state.alphas.frozen = warmup
    losses = []
    done = 0
    truncated = False
    for _ in range(steps):
        try:
            tb = next(train_stream)
            vb = None if warmup else next(val_stream)
        except StopIteration:
            truncated = True
            log.warning("epoch %d: stream exhausted after %d steps", state.epoch, done)
            break
        if not warmup:
            alpha_step(state, vb, tb)
        losses.append(w_step(state, tb))
        state.step += 1
        done += 1
    if trajectory is not None:
        trajectory.sample(state.epoch, state.alphas)
    metrics = EpochMetrics(
        epoch=state.epoch,
        phase="warmup" if warmup else "search",
        steps=done,
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        val_loss=evaluate_loss(state.problem, val_eval or []),
        alpha_entropy={e: state.alphas.entropy(e) for e in state.alphas},
        truncated=truncated,
        alpha_digest=alpha_digest(state.alphas),
    )
    state.epoch += 1
    return metrics


# -------------------------------------------------------------- run_search
@dataclass
class SearchResult:
    spec: DcCellSpec
    alphas: AlphaStore
    trajectory: AlphaTrajectory
    metrics: list[EpochMetrics]
    model: SearchModel
    state: SearchState
    out_dir: Path | None = None


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def build_search(config: RunConfig) -> tuple[DcCellSpec, AlphaStore, SearchModel]:
    m = config.model
    spec, alphas = build_dc_cell(
        m.d_model,
        m.d_hidden,
        heads=tuple(m.heads),
        kernels=tuple(m.kernels),
        mac_menu=tuple(m.mac_menu),
        cell_final_norm=m.cell_final_norm,
        dropout=m.dropout,
    )
    rng = np.random.default_rng([config.seed, 0])
    model = SearchModel(
        spec,
        alphas,
        config.task.d_in,
        config.task.vocab,
        rng,
        n_cells=m.search_cells,
        ffc_half_step=m.ffc_half_step,
        positional=m.positional,
    )
    return spec, alphas, model


def save_alpha(path: Path, alphas: AlphaStore, spec: DcCellSpec, meta: dict | None = None) -> Path:
    info = {"kind": "alpha", "spec": spec.to_dict(), "candidates": {k: list(v) for k, v in alphas.candidates.items()}}
    info.update(meta or {})
    return save_arrays(path, alphas.snapshot(), info)


def load_alpha(path: str | Path) -> tuple[AlphaStore, DcCellSpec, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "alpha" or "spec" not in meta:
        raise ContractError(f"{path} is not an architecture-logit checkpoint")
    spec = DcCellSpec.from_dict(meta["spec"])
    cands = {k: tuple(v) for k, v in meta["candidates"].items()}
    store = AlphaStore(arrays, cands)
    return store, spec, meta


def _dump_failure(out_dir: Path, batch: Batch | None, alphas: AlphaStore, epoch: int, step: int) -> None:
    arrays = {f"alpha/{k}": v for k, v in alphas.snapshot().items()}
    meta = {"kind": "nan-dump", "epoch": epoch, "step": step}
    if batch is not None:
        arrays["batch/features"] = batch.features
        arrays["batch/feat_lengths"] = batch.feat_lengths.astype(np.float64)
        arrays["batch/frame_labels"] = batch.frame_labels.astype(np.float64)
        meta["targets"] = [t.tolist() for t in batch.targets]
    save_arrays(out_dir / "nan_dump", arrays, meta)


class _Recorder:
    """Iterator wrapper remembering the last batch (for failure dumps)."""

    def __init__(self, it: Iterator):
        self.it = it
        self.last = None

    def __iter__(self):
        return self

    def __next__(self):
        self.last = next(self.it)
        return self.last


def run_search(
    config: RunConfig,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics, SearchState], None] | None = None,
) -> SearchResult:
    """Freeze, then alternate; returns the final logits and trajectory.

    ``on_epoch`` is called after every epoch (after its CSV rows are written).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("trajectory.csv", "metrics.csv"):
            (out / name).unlink(missing_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n")
    sc = config.search
    spec, alphas, model = build_search(config)
    problem = SupernetProblem(
        model,
        LossWeights(config.loss.ctc_weight, config.loss.ce_weight),
        sc.alpha_loss,
        seed=config.seed,
    )
    state = SearchState.create(
        problem, sc.lr_w, sc.lr_alpha, sc.freeze_epochs, sc.xi, sc.grad_clip, (sc.beta1, sc.beta2), sc.eps
    )
    data = split_dataset(config.task, config.task_seed)
    val_eval = list(epoch_batches(data.val, min(sc.batch_size, len(data.val)), np.random.default_rng([config.seed, 5])))
    val_stream = _Recorder(cycle_batches(data.val, sc.batch_size, config.seed, 3))
    trajectory = AlphaTrajectory()
    metrics: list[EpochMetrics] = []
    edges = list(alphas)
    for epoch in range(sc.max_epochs):
        train_stream = _Recorder(cycle_batches(data.train, sc.batch_size, config.seed, 1000 + epoch))
        try:
            m = search_epoch(state, train_stream, val_stream, sc.steps_per_epoch, trajectory, val_eval)
        except NumericError:
            if out is not None:
                _dump_failure(out, train_stream.last, alphas, state.epoch, state.step)
            raise
        metrics.append(m)
        log.info(
            "epoch %d [%s] train=%.4f val=%.4f", m.epoch, m.phase, m.train_loss, m.val_loss
        )
        if out is not None:
            append_csv(out / "trajectory.csv", TRAJECTORY_HEADER, [_fmt_row(r) for r in trajectory.rows if r[0] == epoch])
            append_csv(out / "metrics.csv", metrics_header(edges), [m.row(edges)])
        if on_epoch is not None:
            on_epoch(m, state)
    result = SearchResult(spec, alphas, trajectory, metrics, model, state, out)
    if out is not None:
        _write_search_outputs(result, config)
    return result


def _write_search_outputs(result: SearchResult, config: RunConfig) -> None:
    out = result.out_dir
    meta = {"config_hash": config.config_hash(), "epoch": result.state.epoch, "seed": config.seed}
    save_alpha(out / "alpha", result.alphas, result.spec, meta)
    ckpt_meta = dict(
        meta,
        kind="search-checkpoint",
        step=result.state.step,
        rng_state={"data_seed": config.task_seed, "model_seed": config.seed},
        trajectory=[list(r) for r in result.trajectory.rows],
    )
    save_arrays(out / "checkpoint", result.model.state_dict(), ckpt_meta)
    if not result.trajectory.rows:
        result.trajectory.to_csv(out / "trajectory.csv")
    info = {"git_describe": git_describe(), "seed": config.seed, "config_hash": config.config_hash()}
    (out / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")
