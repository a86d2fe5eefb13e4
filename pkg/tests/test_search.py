import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segatt.length import StaticLengthTable
from segatt.model import Segmentation, SegmentalModel
from segatt.search import (
    EmptyBeamError,
    InstanceTooLargeError,
    SearchConfig,
    compositions,
    count_search_errors,
    decode,
    decode_corpus,
    global_score,
    global_search,
    normalize,
    oracle_search,
    score_sequence,
    segmental_search,
    simple_search,
)
from segatt.data import CorpusSpec, generate
from conftest import small_config

BIG = 10**6


def tiny(length_model="neural", ctx=False, vocab=4, seed=0, delta=4):
    cfg = small_config(vocab_size=vocab, pool_factors=[1, 1], ctx_dependency=ctx, length_model=length_model)
    model = SegmentalModel.init(cfg, seed)
    mu = np.random.default_rng(seed).uniform(1, delta, size=vocab)
    model.static_table = StaticLengthTable(mu, delta)
    return model


def features(T, seed=0):
    return np.random.default_rng(seed + 100).normal(size=(T, 4))


def brute_force(model, enc, sc):
    """Enumerate every (segmentation, labels) pair and score it from scratch."""
    best = None
    for comp in compositions(enc.T, sc.delta_max):
        bounds = np.cumsum(comp).tolist()
        for labels in itertools.product(range(1, model.config.vocab_size), repeat=len(comp)):
            s = score_sequence(model, enc, labels, bounds, sc.alpha, sc.gamma, sc.length_model).score
            key = (-s, labels, tuple(bounds))
            if best is None or key < best:
                best = key
    return -best[0], best[1], best[2]


def test_config_validation():
    for kw in ({"beam_size": 0}, {"delta_max": 0}, {"gamma": 2}, {"mode": "greedy"}):
        with pytest.raises(ValueError):
            SearchConfig(**kw)
    with pytest.raises(ValueError):
        SearchConfig.from_dict({"beam": 3})


def test_normalization_examples():
    assert normalize(-4.0, 2, 1) == -2.0
    assert normalize(-4.0, 2, 0) == -4.0
    assert normalize(-4.0, 0, 1) == -4.0


def test_score_sequence_identities(rng):
    model = tiny()
    enc = model.encode(features(6))
    labels, bounds = (1, 3), (2, 6)
    raw = score_sequence(model, enc, labels, bounds, 1.0, 0)
    assert raw.score == raw.raw
    assert abs(raw.raw - (sum(raw.label_scores) + sum(raw.length_scores))) < 1e-12
    norm = score_sequence(model, enc, labels, bounds, 1.0, 1)
    assert abs(norm.score - raw.raw / 2) < 1e-12
    no_len = score_sequence(model, enc, labels, bounds, 0.0, 0)
    assert abs(no_len.score - sum(no_len.label_scores)) < 1e-12
    _, ll = model.seq_log_prob(labels, Segmentation(bounds, 6), enc)
    assert abs(no_len.score - ll.item()) < 1e-12


def test_score_sequence_rejects_invalid(rng):
    model = tiny()
    enc = model.encode(features(5))
    with pytest.raises(ValueError):
        score_sequence(model, enc, (1, 2), (3, 4), 1.0, 0)
    with pytest.raises(ValueError):
        score_sequence(model, enc, (1,), (2, 5), 1.0, 0)


def test_compositions_counts():
    assert sorted(compositions(2, 2)) == [(1, 1), (2,)]
    assert len(list(compositions(4, 4))) == 8
    for T in range(1, 8):
        assert len(list(compositions(T, T))) == 2 ** (T - 1)
        assert all(sum(c) == T and max(c) <= 3 for c in compositions(T, 3))


def test_oracle_guard():
    model = tiny()
    with pytest.raises(InstanceTooLargeError):
        oracle_search(model, model.encode(features(9)), SearchConfig(delta_max=4))
    with pytest.raises(InstanceTooLargeError):
        oracle_search(model, model.encode(features(5)), SearchConfig(delta_max=5))
    with pytest.raises(InstanceTooLargeError):
        oracle_search(tiny(vocab=5), model.encode(features(5)), SearchConfig(delta_max=3))


@pytest.mark.parametrize("lm", ["none", "static", "neural"])
@pytest.mark.parametrize("gamma", [0, 1])
def test_oracle_matches_brute_force(lm, gamma):
    for seed in range(3):
        model = tiny(lm, ctx=seed == 1, vocab=3, seed=seed, delta=3)
        enc = model.encode(features(5, seed))
        sc = SearchConfig(alpha=0.7, gamma=gamma, delta_max=3, length_model=lm)
        res = oracle_search(model, enc, sc)
        score, labels, bounds = brute_force(model, enc, sc)
        assert (res.best.labels, res.best.boundaries) == (labels, bounds)
        assert abs(res.best.normalized(gamma) - score) < 1e-9


def test_oracle_counts_every_candidate():
    model = tiny("none", vocab=3)
    enc = model.encode(features(4))
    res = oracle_search(model, enc, SearchConfig(alpha=0.0, delta_max=4))
    assert res.expansions == sum(2 ** len(c) for c in compositions(4, 4))


def test_oracle_prefers_single_segment_for_flat_models():
    model = tiny("neural", vocab=4)
    for n in ("out.W2", "out.b2", "len.w_out", "len.b_out"):
        model.params[n].data[:] = 0.0
    enc = model.encode(features(6))
    res = oracle_search(model, enc, SearchConfig(alpha=1.0, gamma=0, delta_max=4))
    # q = 0.5 everywhere: each segment costs its length in log 2 plus log 4 for the label
    assert len(res.best.boundaries) == 2
    model_T4 = oracle_search(model, model.encode(features(4)), SearchConfig(alpha=1.0, gamma=0, delta_max=4))
    assert model_T4.best.boundaries == (4,)
    assert model_T4.best.labels == (1,)


@pytest.mark.parametrize("lm", ["none", "static", "neural"])
def test_segmental_equals_oracle_without_recombination(lm):
    for seed, T, delta in itertools.product(range(3), (2, 5, 7), (2, 4)):
        model = tiny(lm, ctx=True, vocab=3, seed=seed, delta=delta)
        enc = model.encode(features(T, seed))
        sc = SearchConfig(beam_size=BIG, alpha=0.6, gamma=seed % 2, delta_max=delta, recombine=False)
        ref = oracle_search(model, enc, sc).best
        got = segmental_search(model, enc, sc).best
        assert (got.labels, got.boundaries, got.log_score) == (ref.labels, ref.boundaries, ref.log_score)


@pytest.mark.parametrize("lm", ["none", "static"])
def test_recombination_exact_without_context_dependency(lm):
    for seed, T in itertools.product(range(4), (3, 5, 7)):
        model = tiny(lm, ctx=False, vocab=3, seed=seed)
        enc = model.encode(features(T, seed))
        sc = SearchConfig(beam_size=BIG, alpha=1.0, gamma=seed % 2, delta_max=4)
        on = segmental_search(model, enc, sc).best
        off = segmental_search(model, enc, SearchConfig(**{**sc.__dict__, "recombine": False})).best
        assert (on.labels, on.boundaries, on.log_score) == (off.labels, off.boundaries, off.log_score)


def test_simple_equals_oracle():
    for seed, T in itertools.product(range(4), range(1, 7)):
        model = tiny("neural", ctx=seed % 2 == 0, vocab=3, seed=seed)
        enc = model.encode(features(T, seed))
        sc = SearchConfig(beam_size=BIG, alpha=1.0, gamma=seed % 2, delta_max=3, mode="simple")
        ref = oracle_search(model, enc, sc).best
        got = simple_search(model, enc, sc).best
        assert (got.labels, got.boundaries, got.log_score) == (ref.labels, ref.boundaries, ref.log_score)


def test_simple_requires_neural_length():
    with pytest.raises(ValueError):
        simple_search(tiny("static"), tiny().encode(features(3)), SearchConfig(mode="simple"))


def test_simple_single_frame_is_argmax_label():
    model = tiny("neural")
    enc = model.encode(features(1))
    res = simple_search(model, enc, SearchConfig(beam_size=4, mode="simple"))
    adv = model.advance(model.initial_state(), 0)
    logp, _ = model.segment_label_scores(adv, enc, 0, 1)
    assert res.best.boundaries == (1,)
    assert res.best.labels == (int(np.argmax(logp[0, 1:])) + 1,)


@pytest.mark.parametrize("search", [simple_search, segmental_search])
def test_certain_end_forces_one_label_per_frame(search):
    model = tiny("neural")
    model.params["len.w_out"].data[:] = 0.0
    model.params["len.b_out"].data[:] = 60.0
    enc = model.encode(features(7))
    res = search(model, enc, SearchConfig(beam_size=3, alpha=1.0, delta_max=4, mode="simple"))
    assert res.best.boundaries == tuple(range(1, 8))


def test_alpha_zero_ignores_length_model():
    model = tiny("static")
    enc = model.encode(features(7))
    a = segmental_search(model, enc, SearchConfig(beam_size=5, alpha=0.0, delta_max=4, length_model="static")).best
    b = segmental_search(model, enc, SearchConfig(beam_size=5, alpha=0.0, delta_max=4, length_model="none")).best
    assert (a.labels, a.boundaries, a.log_score) == (b.labels, b.boundaries, b.log_score)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 6), st.sampled_from(["none", "static", "neural"]))
def test_hypotheses_are_valid_segmentations(seed, T, beam, lm):
    model = tiny(lm, ctx=True, seed=seed % 5)
    enc = model.encode(features(T, seed))
    for mode in (["segmental", "simple"] if lm == "neural" else ["segmental"]):
        res = decode(model, enc, SearchConfig(beam_size=beam, delta_max=4, mode=mode, length_model=lm))
        for h in res.final:
            Segmentation(h.boundaries, T)
            assert len(h.labels) == len(h.boundaries)
            assert all(1 <= a < model.config.vocab_size for a in h.labels)
            assert math.isfinite(h.log_score)
            assert abs(h.log_score - sum(h.label_scores) - sum(h.length_scores)) < 1e-9
        assert res.best == res.final[0]


def test_final_list_sorted_by_rule():
    model = tiny("static", ctx=True)
    enc = model.encode(features(8))
    res = segmental_search(model, enc, SearchConfig(beam_size=6, alpha=0.5, gamma=1, delta_max=4))
    keys = [(-h.normalized(1), h.labels) for h in res.final]
    assert keys == sorted(keys)


def test_beam_never_lowers_best_score_on_tiny_grid():
    for seed, T, lm in itertools.product(range(5), (4, 6, 8), ("none", "static", "neural")):
        model = tiny(lm, ctx=False, seed=seed)
        enc = model.encode(features(T, seed))
        scores = []
        for beam in (1, 2, 4, 8, 64):
            sc = SearchConfig(beam_size=beam, alpha=1.0, delta_max=4, recombine=lm != "neural")
            scores.append(segmental_search(model, enc, sc).best.log_score)
        assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))


@pytest.mark.parametrize("mode", ["segmental", "simple"])
def test_empty_beam_when_no_segment_can_end(mode):
    model = tiny("neural")
    model.params["len.b_out"].data[:] = -np.inf  # q = 0: no segment ever ends
    enc = model.encode(features(5))
    with pytest.raises(EmptyBeamError):
        decode(model, enc, SearchConfig(beam_size=2, delta_max=3, alpha=1.0, mode=mode))


def test_delta_one_gives_one_label_per_frame():
    model = tiny("static", delta=1)
    enc = model.encode(features(6))
    res = segmental_search(model, enc, SearchConfig(beam_size=2, delta_max=1, alpha=1.0))
    assert res.best.boundaries == tuple(range(1, 7))


def test_global_search_matches_exhaustive_label_sequences():
    cfg = small_config(vocab_size=3, pool_factors=[1, 1], window_mode="global", length_model="none")
    for seed in range(3):
        model = SegmentalModel.init(cfg, seed)
        enc = model.encode(features(3, seed))
        res = global_search(model, enc, SearchConfig(beam_size=BIG, gamma=0), max_len=3)
        best = max((global_score(model, enc, labels, 0).score, labels)
                   for n in range(4) for labels in itertools.product((1, 2), repeat=n))
        assert abs(res.best.log_score - best[0]) < 1e-9
        assert res.best.labels == best[1]


def _corpus(n=6):
    spec = CorpusSpec(num_labels=3, input_dim=4, downsampling=1, num_train=0, num_dev=n, num_eval=0,
                      min_labels=1, max_labels=3, seg_len_min=1, seg_len_max=2, max_seg_len=3, noise=1.0, seed=3)
    return generate(spec)["dev"]


def test_search_errors_zero_for_oracle():
    model = tiny("neural", ctx=True)
    utts = [u for u in _corpus(12) if u.T <= 8]
    sc = SearchConfig(alpha=1.0, delta_max=4, mode="oracle")
    assert count_search_errors(model, utts, sc) == 0.0


def test_search_errors_zero_when_truth_recognised():
    model = tiny("static")
    utts = _corpus(4)
    sc = SearchConfig(alpha=1.0, delta_max=4)
    results = decode_corpus(model, utts, sc)
    for r, u in zip(results, utts):
        r.best.labels, r.best.boundaries = tuple(u.labels), tuple(u.boundaries)
    assert count_search_errors(model, utts, sc, results) == 0.0


def test_search_errors_detect_bad_hypotheses():
    model = tiny("static")
    utts = [u for u in _corpus(12) if u.T <= 8]
    sc = SearchConfig(alpha=1.0, delta_max=4, mode="oracle")
    results = decode_corpus(model, utts, sc)
    truth_wins = 0
    for r, u in zip(results, utts):
        # replace the decode result with the worst single-segment guess
        r.best.labels, r.best.boundaries = (1,) * u.T, tuple(range(1, u.T + 1))
        truth = score_sequence(model, model.encode(u.features), u.labels, u.boundaries, 1.0, 0).score
        bad = score_sequence(model, model.encode(u.features), r.best.labels, r.best.boundaries, 1.0, 0).score
        truth_wins += truth > bad
    assert count_search_errors(model, utts, sc, results) == truth_wins / len(utts)


def test_decode_corpus_jobs_independent():
    model = tiny("neural", ctx=True)
    utts = _corpus(6)
    sc = SearchConfig(beam_size=3, alpha=1.0, delta_max=4)
    one = decode_corpus(model, utts, sc, jobs=1)
    two = decode_corpus(model, utts, sc, jobs=2)
    assert [(r.best.labels, r.best.boundaries, r.best.log_score) for r in one] == \
           [(r.best.labels, r.best.boundaries, r.best.log_score) for r in two]
