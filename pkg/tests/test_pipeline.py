import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from dcnas.derive import ArchDescriptor, NodeChoice, derive_architecture
from dcnas.pipeline import edit_distance, greedy_ctc_decode, token_error_rate
from dcnas.search_space import AlphaStore, OpChoice, build_dc_cell


def test_greedy_decode_examples():
    lp = np.log(np.eye(4)[[0, 1, 1, 0, 1, 2, 2, 3]] * 0.97 + 0.01)
    assert greedy_ctc_decode(lp) == [1, 1, 2, 3]
    assert greedy_ctc_decode(lp, length=3) == [1]
    assert greedy_ctc_decode(np.zeros((5, 3))) == []


def test_greedy_decode_matches_simple_version():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T, V = int(rng.integers(1, 12)), int(rng.integers(2, 5))
        lp = rng.normal(size=(T, V))
        assert greedy_ctc_decode(lp) == ref.greedy_decode_simple(np.argmax(lp, axis=1).tolist())


def test_edit_distance_examples():
    assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
    assert edit_distance([1, 2, 3], []) == 3
    assert edit_distance([], [4, 4]) == 2
    assert edit_distance([1, 2, 3], [1, 3, 3, 4]) == 2


seqs = st.lists(st.integers(1, 4), max_size=8)


@given(st.lists(st.tuples(seqs, seqs), min_size=1, max_size=6))
def test_ter_bounds(pairs):
    refs, hyps = [p[0] for p in pairs], [p[1] for p in pairs]
    ter = token_error_rate(refs, hyps)
    assert 0.0 <= ter <= 1.0
    assert token_error_rate(refs, refs) == 0.0


@given(seqs, seqs)
def test_edit_distance_symmetric_and_bounded(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


def _descriptors():
    mac = st.tuples(st.sampled_from([(0,), (1,)]), st.sampled_from([OpChoice("ff_half"), OpChoice("identity")]))
    mha = st.tuples(st.sampled_from([(0, 1), (0, 2), (1, 2)]), st.sampled_from([2, 4, 8]))
    cnn = st.tuples(st.sampled_from([(1, 2), (1, 3), (2, 3)]), st.sampled_from([15, 23, 31]))
    return st.builds(
        lambda m, h, c: ArchDescriptor({
            "mac": NodeChoice(m[0], m[1]),
            "mha": NodeChoice(h[0], OpChoice("mhsa", h[1])),
            "cnn": NodeChoice(c[0], OpChoice("conv", c[1])),
            "ffc": NodeChoice((4,), OpChoice("ff")),
        }),
        mac, mha, cnn,
    )


@given(_descriptors())
def test_descriptor_json_round_trip(desc):
    spec, _ = build_dc_cell(32, 64)
    desc.validate(spec, strict=True)
    assert ArchDescriptor.from_json(desc.to_json()) == desc


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_derive_invariant_to_logit_scale(seed, scale):
    spec, zeros = build_dc_cell(32, 64)
    rng = np.random.default_rng(seed)
    logits = {e: rng.normal(size=zeros[e].shape) for e in zeros}
    a = AlphaStore(logits, zeros.candidates)
    b = AlphaStore({e: v * scale for e, v in logits.items()}, zeros.candidates)
    assert derive_architecture(a, spec) == derive_architecture(b, spec)
