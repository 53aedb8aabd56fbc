"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
The planted-filter and pipeline checks run real desk-preset searches and take
several minutes on one core.
"""

from __future__ import annotations

import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import reference as ref  # noqa: E402
from helpers import ToyProblem, tiny_config  # noqa: E402

from dcnas import tensor as T  # noqa: E402
from dcnas.blocks import ConvModule, FeedForwardModule, MhsaModule  # noqa: E402
from dcnas.cli import main as cli  # noqa: E402
from dcnas.config import load_config  # noqa: E402
from dcnas.data import cycle_batches, split_dataset  # noqa: E402
from dcnas.derive import (  # noqa: E402
    ArchDescriptor,
    NodeChoice,
    build_stacked_encoder,
    builtin_arch,
    derive_architecture,
    one_hot_alphas,
    render_arch,
    transplant,
)
from dcnas.encoder import SearchModel  # noqa: E402
from dcnas.engine import (  # noqa: E402
    AlphaTrajectory,
    SearchState,
    SupernetProblem,
    alpha_digest,
    alpha_gradients,
    build_search,
    run_search,
    second_order_alpha_grad,
)
from dcnas.gradcheck import gradcheck  # noqa: E402
from dcnas.losses import LossWeights, ctc_loss  # noqa: E402
from dcnas.pipeline import evaluate, model_dims, train_descriptor  # noqa: E402
from dcnas.search_space import OpChoice, SuperCell, build_dc_cell, mixed_op_forward  # noqa: E402
from dcnas.tensor import Tensor  # noqa: E402

from conftest import ACCEPTANCE  # noqa: E402

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(5)
_reporter = None


@pytest.fixture(autouse=True)
def _live_reporter(request):
    global _reporter
    _reporter = request.config.pluginmanager.get_plugin("terminalreporter")


def report(tag: str, title: str, ok: bool, detail: str) -> None:
    """Record one criterion line (repeated in the terminal summary) and fail if not met."""
    line = f"{'PASS' if ok else 'FAIL'} {tag} {title}: {detail}"
    ACCEPTANCE.append(line)
    if _reporter is not None:
        _reporter.write_line("")
        _reporter.write_line(line)
    assert ok, line


# ---------------------------------------------------------------- AC1
def _probe(out, rng):
    return Tensor(rng.uniform(-1, 1, size=out.shape))


def _primitive_cases():
    def un(f, *shapes):
        return f, shapes

    return {
        "add": un(lambda a, b: a + b, (3, 4), (4,)),
        "sub": un(lambda a, b: a - b, (3, 4), (3, 4)),
        "mul": un(lambda a, b: a * b, (3, 4), (3, 1)),
        "div": un(lambda a, b: a / (b * b + 1.0), (3, 4), (4,)),
        "scale": un(lambda a: T.scale(a, 1.7), (3, 4)),
        "matmul": un(T.matmul, (3, 4), (4, 2)),
        "sum/mean": un(lambda a: a.sum(axis=0) + a.mean(axis=0), (3, 4)),
        "reshape/transpose": un(lambda a: a.reshape(4, 3).transpose(1, 0), (3, 4)),
        "getitem": un(lambda a: a[1:, ::2], (3, 4)),
        "concat": un(lambda a, b: T.concat([a, b], axis=0), (2, 3), (1, 3)),
        "exp": un(T.exp, (3, 4)),
        "log": un(lambda a: T.log(a * a + 0.5), (3, 4)),
        "sigmoid": un(T.sigmoid, (3, 4)),
        "tanh": un(T.tanh, (3, 4)),
        "relu": un(lambda a: T.relu(a + 2.0) + T.relu(a - 2.0), (3, 4)),
        "swish": un(T.swish, (3, 4)),
        "glu": un(T.glu, (3, 4)),
        "softmax": un(lambda a: T.softmax(a, axis=-1), (3, 4)),
        "log_softmax": un(lambda a: T.log_softmax(a, axis=-1), (3, 4)),
        "layer_norm": un(lambda a, g, b: T.layer_norm(a, g, b), (2, 4), (4,), (4,)),
        "conv1d_depthwise": un(T.conv1d_depthwise, (7, 3), (5, 3)),
        "dropout": un(lambda a: T.dropout(a, 0.25, seed=3, step=1, op_id=2), (4, 4)),
        "embedding_lookup": un(lambda w: T.embedding_lookup(w, [2, 0, 2, 1]), (3, 4)),
        "where": un(lambda a: T.where(np.array([True, False, True, True]), a, 0.0), (3, 4)),
    }


def _block_worst(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    d, t = 8, 6
    mask = np.array([True] * 5 + [False])
    if name in ("FF", "MHSA", "Conv"):
        block = {
            "FF": lambda: FeedForwardModule(d, 16, rng),
            "MHSA": lambda: MhsaModule(16, 4, rng),
            "Conv": lambda: ConvModule(d, 5, rng),
        }[name]()
        x = Tensor(rng.uniform(-1, 1, size=(t, block.d_model)), requires_grad=True)
        for p in block.parameters():
            p.data = p.data + rng.uniform(-0.3, 0.3, size=p.shape)
        probe = _probe(x, rng)
        m = None if name == "FF" else mask
        return gradcheck(lambda: (block(x, m) * probe).sum(), [x] + block.parameters(), max_entries=10, rng=rng, per_tensor=False)
    if name == "mixed-op":
        cands = [ConvModule(d, k, rng) for k in (3, 5, 7)]
        alpha = Tensor(rng.normal(size=3), requires_grad=True)
        x = Tensor(rng.uniform(-1, 1, size=(t, d)), requires_grad=True)
        probe = _probe(x, rng)
        params = [alpha, x] + [p for c in cands for p in c.parameters()]
        return gradcheck(lambda: (mixed_op_forward(cands, alpha, x) * probe).sum(), params, max_entries=6, rng=rng, per_tensor=False)
    # full DC-cell supernet through the mixed CTC + CE loss
    spec, alphas = build_dc_cell(d, 16, heads=(2, 4), kernels=(3, 5, 7))
    for e in alphas:
        alphas[e].data = rng.normal(size=alphas[e].shape) * 0.5
    model = SearchModel(spec, alphas, 4, 3, rng)
    data = split_dataset(tiny_config().task, seed)
    batch = next(cycle_batches(data.train, 3, seed, 0))
    params = alphas.parameters() + model.parameters()
    return gradcheck(lambda: model.objective(batch, LossWeights()).loss, params, max_entries=3, rng=rng, per_tensor=False)


def test_ac1_gradient_suite():
    start = time.time()
    worst: dict[str, float] = {}
    for name, (f, shapes) in _primitive_cases().items():
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            xs = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True) for s in shapes]
            probe = _probe(f(*xs), rng)
            err = gradcheck(lambda: (f(*xs) * probe).sum(), xs)
            worst[name] = max(worst.get(name, 0.0), err)
    for name in ("FF", "MHSA", "Conv", "mixed-op", "DC-cell+mixed-loss"):
        for seed in SEEDS:
            worst[name] = max(worst.get(name, 0.0), _block_worst(name, seed))
    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 120
    detail = f"{len(worst)} checks x {len(SEEDS)} seeds, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
    report("AC1", "gradient suite", ok, detail + (f", failing {bad}" if bad else ""))


# ---------------------------------------------------------------- AC2
def test_ac2_ctc_oracle():
    start = time.time()
    rng = np.random.default_rng(0)
    worst, cases = 0.0, 0
    for V in (2, 3):
        for T_ in range(1, 7):
            for L in range(1, 4):
                for target in itertools.product(range(1, V + 1), repeat=L):
                    lp = T.log_softmax(Tensor(rng.normal(size=(T_, V + 1)) * 1.5), axis=-1)
                    brute_p = ref.ctc_brute_force(np.exp(lp.data), target)
                    got = ctc_loss(lp, list(target)).item()
                    if brute_p == 0.0:
                        diff = 0.0 if got == np.inf else np.inf
                    else:
                        diff = abs(got + np.log(brute_p))
                    worst = max(worst, diff)
                    cases += 1
    elapsed = time.time() - start
    ok = worst < 1e-10 and elapsed < 60
    report("AC2", "CTC oracle", ok, f"{cases} (T, L, V, target) cases, max |delta| {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- AC3
def test_ac3_one_hot_equivalence():
    rng = np.random.default_rng(0)
    topologies = list(itertools.product([(0,), (1,)], [(0, 1), (0, 2), (1, 2)], [(1, 2), (1, 3), (2, 3)]))
    worst, n = 0.0, 0
    for i, (mac, heads, kernel) in enumerate(itertools.product(["ff_half", "identity"], [2, 4, 8], [15, 23, 31])):
        mac_in, mha_in, cnn_in = topologies[i % len(topologies)]
        desc = ArchDescriptor({
            "mac": NodeChoice(mac_in, OpChoice(mac)),
            "mha": NodeChoice(mha_in, OpChoice("mhsa", heads)),
            "cnn": NodeChoice(cnn_in, OpChoice("conv", kernel)),
            "ffc": NodeChoice((4,), OpChoice("ff")),
        })
        spec, _ = build_dc_cell(16, 32)
        sup = SuperCell(spec, one_hot_alphas(spec, desc), rng)
        for p in sup.parameters():
            p.data = p.data + rng.normal(size=p.shape) * 0.1
        cell = transplant(sup, desc)
        x = Tensor(rng.normal(size=(2, 11, 16)))
        mask = np.array([[True] * 11, [True] * 7 + [False] * 4])
        worst = max(worst, float(np.max(np.abs(sup(x, mask).data - cell(x, mask).data))))
        n += 1
    report("AC3", "one-hot equivalence", n == 18 and worst < 1e-10, f"{n} configurations, max |delta| {worst:.2e}")


# ---------------------------------------------------------------- AC4
def test_ac4_second_order_consistency():
    config = tiny_config()
    spec, alphas, model = build_search(config)
    problem = SupernetProblem(model, LossWeights())
    state = SearchState.create(problem, xi=1e-8)
    data = split_dataset(config.task, 0)
    tb, vb = next(cycle_batches(data.train, 4, 0, 1)), next(cycle_batches(data.val, 4, 0, 2))
    first = alpha_gradients(problem, vb, 0)[1]
    second = second_order_alpha_grad(state, tb, vb)
    cont = max(float(np.max(np.abs(a - b))) for a, b in zip(first, second))

    analytic = 0.0
    for w0, a0, xi in [(1.5, 0.3, 0.1), (-0.7, 2.0, 0.05), (0.2, -1.0, 0.3), (3.0, 1.0, 0.01)]:
        toy = ToyProblem(w0, a0, lambda w, a: (w - a) ** 2, lambda w, a: w * w)
        g = second_order_alpha_grad(SearchState.create(toy, xi=xi), None, None)[0][0]
        analytic = max(analytic, abs(g - 4 * xi * (w0 - xi * 2 * (w0 - a0))))
    ok = cont < 1e-6 and analytic < 1e-6
    report("AC4", "second-order consistency", ok, f"xi=1e-8 vs first order {cont:.2e}; closed form {analytic:.2e}")


# ---------------------------------------------------------------- AC5
def test_ac5_freeze_contract():
    config = load_config("desk", seed=0, overrides={"search": {"max_epochs": 5, "freeze_epochs": 3}})
    digests: list[str] = []

    def hook(m, state):
        digests.append(m.alpha_digest)

    _, alphas, _ = build_search(config)
    start_digest = alpha_digest(alphas)
    run_search(config, on_epoch=hook)
    frozen = all(d == start_digest for d in digests[:3])
    moved = digests[4] != start_digest
    report("AC5", "freeze contract", frozen and moved, f"epochs 0-2 identical={frozen}, epoch 4 changed={moved}")


# ---------------------------------------------------------------- AC6
def test_ac6_planted_filter_search(tmp_path):
    base = json.loads((CONFIGS / "planted_filter.json").read_text())
    planted = base["task"]["planted_kernel"]
    start = time.time()
    hits, lines = 0, []
    for seed in range(1, 6):
        config = load_config(path=CONFIGS / "planted_filter.json", seed=seed)
        out = tmp_path / f"s{seed}"
        result = run_search(config, out)
        chosen = derive_architecture(result.alphas, result.spec).nodes["cnn"].op.value
        traj = AlphaTrajectory.from_csv(out / "trajectory.csv")
        final = traj.weights(max(traj.epochs()), "cnn.op")
        M = len(final)
        w = final[f"conv_k{planted}"]
        hit = chosen == planted and w > 1.0 / M
        hits += hit
        lines.append(f"seed {seed}: k{chosen} (w={w:.3f})")
    elapsed = time.time() - start
    ok = hits >= 4 and elapsed < 1800
    report("AC6", "planted-filter search", ok, f"planted k{planted}: {hits}/5 hits [{'; '.join(lines)}], {elapsed:.0f}s")


# ---------------------------------------------------------------- AC7
def test_ac7_end_to_end_pipeline(tmp_path):
    config = load_config(path=CONFIGS / "pattern_ctc.json", seed=1)
    found = run_search(config, tmp_path / "search")
    desc = derive_architecture(found.alphas, found.spec)
    trained = train_descriptor(config, desc, tmp_path / "train")
    res = evaluate(trained.model, config.task, config.task_seed)
    ok = res.relative_gain >= 0.5
    report(
        "AC7",
        "end-to-end pipeline",
        ok,
        f"TER {res.ter:.3f} vs all-blank baseline {res.baseline_ter:.3f} (relative gain {res.relative_gain:.0%})",
    )


# ---------------------------------------------------------------- AC8
def test_ac8_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "search": {"max_epochs": 4, "steps_per_epoch": 15, "freeze_epochs": 2},
        "train": {"epochs": 2, "steps_per_epoch": 10},
        "task": {"n_utterances": 200, "eval_utterances": 50},
    }))
    files = {}
    for run in ("a", "b"):
        d = tmp_path / run
        common = ["--config", str(cfg), "--preset", "desk", "--seed", "7"]
        assert cli(["search", *common, "--out", str(d / "search")]) == 0
        assert cli(["derive", "--alpha", str(d / "search" / "alpha.json"), "--out", str(d / "arch.json")]) == 0
        assert cli(["train", *common, "--arch", str(d / "arch.json"), "--out", str(d / "train")]) == 0
        assert cli(["eval", *common, "--ckpt", str(d / "train" / "model.json"), "--out", str(d / "eval.json")]) == 0
        files[run] = {
            p.relative_to(d).as_posix(): p.read_bytes()
            for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "run_info.json"
        }
    capsys.readouterr()
    same = files["a"] == files["b"]
    checked = ["search/alpha.bin", "search/metrics.csv", "arch.json", "train/train_metrics.csv", "train/model.bin"]
    ok = same and all(c in files["a"] for c in checked)
    report("AC8", "determinism", ok, f"{len(files['a'])} artifacts byte-identical across two runs: {same}")


# ---------------------------------------------------------------- AC9
def test_ac9_golden_descriptor(capsys):
    desc = builtin_arch("darts_conformer")
    nodes = desc.nodes
    content = (
        nodes["cnn"].op == OpChoice("conv", 15)
        and nodes["mha"].op == OpChoice("mhsa", 4)
        and nodes["mac"].op == OpChoice("ff_half")
        and set(nodes["mha"].inputs) == {1, 2}
        and set(nodes["cnn"].inputs) == {1, 3}
    )
    capsys.readouterr()
    rc = cli(["show-arch", "--arch", "darts_conformer", "--layers", "6"])
    shown = capsys.readouterr().out
    rendered = rc == 0 and render_arch(desc) in shown and "cells.5" in shown
    config = load_config("desk")
    enc = build_stacked_encoder(desc, 6, model_dims(config))
    x = np.random.default_rng(0).normal(size=(3, 17, config.task.d_in))
    mask = np.arange(17)[None, :] < np.array([17, 12, 5])[:, None]
    out = enc.forward(x, mask)
    shape_ok = len(enc.cells) == 6 and out.shape == (3, 17, config.task.vocab + 1)
    probs_ok = np.allclose(np.exp(out.data).sum(-1), 1.0)
    ok = content and rendered and shape_ok and probs_ok
    report("AC9", "golden descriptor", ok, f"content={content}, show-arch={rendered}, 6-layer forward {out.shape}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
