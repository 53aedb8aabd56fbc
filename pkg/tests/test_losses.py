import itertools

import numpy as np
import pytest

import reference as ref
from conftest import SEEDS
from dcnas.errors import DataError, ShapeError
from dcnas.gradcheck import gradcheck
from dcnas.losses import (
    Batch,
    LossWeights,
    ctc_feasible,
    ctc_loss,
    ctc_loss_batch,
    frame_ce_loss,
    mix,
    mixed_loss,
)
from dcnas.tensor import Tensor, log_softmax


def rand_logp(rng, T, C):
    return log_softmax(Tensor(rng.normal(size=(T, C)) * 1.5), axis=-1)


def test_ctc_single_frame():
    lp = np.log(np.array([[0.2, 0.5, 0.3]]))
    assert ctc_loss(Tensor(lp), [1]).item() == pytest.approx(-np.log(0.5), abs=1e-14)


def test_ctc_two_frames_uniform():
    lp = np.full((2, 3), -np.log(3.0))
    assert ctc_loss(Tensor(lp), [1]).item() == pytest.approx(-np.log(1 / 3), abs=1e-14)


def test_ctc_t4_l2_matches_enumeration(rng):
    lp = rand_logp(rng, 4, 4)
    brute = -np.log(ref.ctc_brute_force(np.exp(lp.data), [2, 3]))
    assert abs(ctc_loss(lp, [2, 3]).item() - brute) < 1e-10


def test_ctc_grid_sweep_against_enumeration():
    rng = np.random.default_rng(0)
    worst = 0.0
    for V in (2, 3):
        for T in range(1, 7):
            for L in range(1, 4):
                for target in itertools.product(range(1, V + 1), repeat=L):
                    if not ctc_feasible(T, target):
                        assert ctc_loss(rand_logp(rng, T, V + 1), list(target)).item() == np.inf
                        continue
                    lp = rand_logp(rng, T, V + 1)
                    brute = -np.log(ref.ctc_brute_force(np.exp(lp.data), target))
                    worst = max(worst, abs(ctc_loss(lp, list(target)).item() - brute))
    assert worst < 1e-10


def test_ctc_batch_matches_single(rng):
    B, T, C = 3, 6, 4
    lp = log_softmax(Tensor(rng.normal(size=(B, T, C))), axis=-1)
    targets = [np.array([1, 2]), np.array([3]), np.array([1, 1, 2])]
    lengths = [6, 4, 5]
    batch = ctc_loss_batch(lp, lengths, targets).data
    for b in range(B):
        single = ctc_loss(Tensor(lp.data[b, : lengths[b]]), targets[b]).item()
        assert batch[b] == pytest.approx(single, abs=1e-12)


def test_ctc_infeasible_gives_inf_without_gradient():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    loss = ctc_loss(log_softmax(x), [1, 1])  # repeat needs 3 frames
    assert loss.item() == np.inf
    log_softmax(x).sum().backward()
    x.grad = None
    lp = log_softmax(x)
    ctc_loss_batch(lp.reshape(1, 2, 3), [2], [[1, 1]]).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_ctc_shape_errors(rng):
    with pytest.raises(ShapeError):
        ctc_loss(rand_logp(rng, 3, 3), [3])
    with pytest.raises(ShapeError):
        ctc_loss(Tensor(np.zeros((2, 3, 3))), [1])


def test_ctc_permutation_sensitive(rng):
    lp = rand_logp(rng, 6, 4)
    perm = np.array([5, 3, 0, 4, 1, 2])
    assert ctc_loss(lp, [1, 2, 3]).item() != ctc_loss(Tensor(lp.data[perm]), [1, 2, 3]).item()


@pytest.mark.parametrize("seed", SEEDS)
def test_ctc_gradient_t5_v3(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, size=(5, 4)), requires_grad=True)
    target = list(rng.integers(1, 4, size=2))
    assert gradcheck(lambda: ctc_loss(log_softmax(x), target), [x]) < 1e-4


def test_frame_ce_examples(rng):
    labels = np.array([0, 2, 1, 1])
    logits = np.full((4, 3), -20.0)
    logits[np.arange(4), labels] = 20.0
    assert frame_ce_loss(log_softmax(Tensor(logits)), labels).item() <= 1e-9
    uni = Tensor(np.full((4, 3), -np.log(3.0)))
    assert frame_ce_loss(uni, labels).item() == pytest.approx(np.log(3.0), abs=1e-14)
    lp = rand_logp(rng, 6, 4)
    lab = rng.integers(0, 4, size=6)
    expected = -np.mean([lp.data[t, lab[t]] for t in range(4)])
    assert abs(frame_ce_loss(lp, lab, length=4).item() - expected) < 1e-12


def test_frame_ce_label_out_of_range(rng):
    with pytest.raises(DataError):
        frame_ce_loss(rand_logp(rng, 3, 3), [0, 1, 3])


def _batch(rng, B=3, T=6, V=3):
    lengths = np.array([6, 5, 4])[:B]
    targets = [rng.integers(1, V + 1, size=2) for _ in range(B)]
    labels = rng.integers(0, V + 1, size=(B, T)) * (np.arange(T)[None] < lengths[:, None])
    return Batch(rng.normal(size=(B, T, 2)), lengths, targets, labels)


def test_mix_arithmetic():
    assert mix(1.0, 2.0) == pytest.approx(1.3)


def test_mixed_loss_ce_weight_zero_is_ctc(rng):
    batch = _batch(rng)
    lp = log_softmax(Tensor(rng.normal(size=(3, 6, 4))), axis=-1)
    got = mixed_loss(lp, batch, LossWeights(1.0, 0.0)).loss.item()
    expected = np.mean(ctc_loss_batch(lp, batch.feat_lengths, batch.targets).data)
    assert got == pytest.approx(expected, abs=1e-12)


def test_mixed_loss_gradient_linearity(rng):
    batch = _batch(rng)
    x = Tensor(rng.normal(size=(3, 6, 4)), requires_grad=True)

    def grad(weights):
        x.grad = None
        mixed_loss(log_softmax(x, axis=-1), batch, weights).loss.backward()
        return x.grad.copy()

    g_mix, g_ctc, g_ce = grad(LossWeights()), grad(LossWeights(1.0, 0.0)), grad(LossWeights(0.0, 1.0))
    assert np.max(np.abs(g_mix - (0.7 * g_ctc + 0.3 * g_ce))) < 1e-10


def test_mixed_loss_skips_infeasible(rng):
    batch = _batch(rng)
    batch.targets[1] = np.array([1, 1, 1, 2, 2, 3])  # needs 8 frames, has 5
    lp = log_softmax(Tensor(rng.normal(size=(3, 6, 4))), axis=-1)
    res = mixed_loss(lp, batch)
    assert res.skipped == 1 and np.isfinite(res.loss.item())
    for i in range(3):
        batch.targets[i] = np.array([1, 1, 1, 2, 2, 3, 3])
    with pytest.raises(DataError):
        mixed_loss(lp, batch)


def test_losses_non_negative(rng):
    batch = _batch(rng)
    res = mixed_loss(log_softmax(Tensor(rng.normal(size=(3, 6, 4))), axis=-1), batch)
    assert res.ctc >= 0 and res.ce >= 0


def test_loss_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        LossWeights(0.5, 0.6)
