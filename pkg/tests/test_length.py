import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segatt.length import (
    StaticLengthTable,
    decode_blank_alignment,
    encode_blank_alignment,
    log_q_terms,
    neural_q,
    neural_segment_log_prob,
    segment_log_probs_from_logits,
    shifted_inputs,
    static_estimate,
    static_log_prob,
)
from segatt.model import BLANK, SegmentalModel, SegmentationError
from conftest import small_config


@settings(max_examples=60)
@given(st.lists(st.floats(-5, 30), min_size=1, max_size=6), st.integers(1, 25))
def test_static_sums_to_one(mu, delta_max):
    table = StaticLengthTable(np.array(mu), delta_max)
    assert np.abs(np.exp(table.log_probs()).sum(axis=1) - 1).max() < 1e-12


def test_static_values_and_support():
    table = StaticLengthTable(np.array([0.0, 3.0]), 5)
    z = sum(math.exp(-abs(3.0 - d)) for d in range(1, 6))
    assert abs(table.Z[1] - z) < 1e-12
    assert abs(static_log_prob(table, 1, 3) - (0.0 - math.log(z))) < 1e-12
    assert table.log_prob(1, 0) == -math.inf
    assert table.log_prob(1, 6) == -math.inf
    # mode sits at the mean
    assert np.argmax(table.log_probs()[1]) == 2


def test_static_estimate_means_and_fallback():
    aligns = [([1, 2], [3, 7]), ([1], [5])]
    table = static_estimate(aligns, vocab_size=4, delta_max=10)
    assert table.mu[1] == 4.0
    assert table.mu[2] == 4.0
    global_mean = (3 + 4 + 5) / 3
    assert table.mu[3] == global_mean
    with pytest.raises(ValueError):
        StaticLengthTable.estimate([], 3)


def test_blank_alignment_example():
    omega = encode_blank_alignment([2, 1], [2, 5], 5)
    assert omega == [BLANK, 2, BLANK, BLANK, 1]
    assert shifted_inputs(omega) == [BLANK, BLANK, 2, BLANK, BLANK]
    with pytest.raises(SegmentationError):
        encode_blank_alignment([1, 2], [3, 3], 3)
    with pytest.raises(ValueError):
        encode_blank_alignment([0], [2], 2)


@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 4)), min_size=1, max_size=8))
def test_blank_alignment_round_trip(segs):
    labels = [a for a, _ in segs]
    bounds = np.cumsum([n for _, n in segs]).tolist()
    omega = encode_blank_alignment(labels, bounds, bounds[-1])
    assert decode_blank_alignment(omega) == (labels, bounds)


@settings(max_examples=40)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=15))
def test_neural_telescoping(q):
    q = np.array(q)
    T = len(q)
    total = sum(math.exp(neural_segment_log_prob(0, t, q)) for t in range(1, T + 1))
    survive = float(np.prod(1 - q))
    assert abs(total + survive - 1) < 1e-10


def test_neural_segment_examples():
    q = np.array([0.2, 0.5, 0.9])
    assert abs(neural_segment_log_prob(1, 3, q) - (math.log(0.5) + math.log(0.9))) < 1e-15
    assert neural_segment_log_prob(2, 2, q) == -math.inf
    lp = segment_log_probs_from_logits(np.log(q / (1 - q)))
    for k in range(3):
        assert abs(lp[k] - neural_segment_log_prob(0, k + 1, q)) < 1e-12


def test_log_q_terms_consistent():
    z = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    lq, l1 = log_q_terms(z)
    q = 1 / (1 + np.exp(-z))
    assert np.allclose(np.exp(lq), q)
    assert np.allclose(np.exp(l1), 1 - q)
    assert np.all(np.isfinite(log_q_terms(np.array([-1e4, 1e4]))[0]))


def test_neural_q_is_causal(rng):
    model = SegmentalModel.init(small_config(), 2)
    enc = model.encode(rng.normal(size=(16, 4)))
    prefix = [0, 2, 0, 0, 3, 0]
    q4 = neural_q(model.length, enc, prefix, 4)
    # changing symbols at or after frame 4 must not matter for q_4
    assert neural_q(model.length, enc, prefix[:3] + [1, 1, 1], 4) == q4
    assert neural_q(model.length, enc, prefix[:2] + [1], 4) != q4
    # changing encoder frames after 4 must not matter either
    enc2 = model.encode(rng.normal(size=(16, 4)))
    enc2.h.data[:4] = enc.h.data[:4]
    enc2.cache.clear()
    assert abs(neural_q(model.length, enc2, prefix, 4) - q4) < 1e-15


def test_neural_q_values_match_teacher_logits(rng):
    model = SegmentalModel.init(small_config(), 3)
    enc = model.encode(rng.normal(size=(12, 4)))
    omega = encode_blank_alignment([1, 3], [2, enc.T], enc.T)
    q = model.length.q_values(enc, omega)
    z = model.length.teacher_logits(enc, shifted_inputs(omega)).data
    assert np.allclose(q, 1 / (1 + np.exp(-z)), atol=1e-14)
    for t in range(1, enc.T + 1):
        assert abs(neural_q(model.length, enc, omega, t) - q[t - 1]) < 1e-14


def test_run_matches_teacher_forcing(rng):
    model = SegmentalModel.init(small_config(), 4)
    enc = model.encode(rng.normal(size=(12, 4)))
    omega = [0, 2, 0, 0, 0, 0][: enc.T]
    z = model.length.teacher_logits(enc, shifted_inputs(omega)).data
    logits, states = model.length.run(enc, model.length.initial_state(), 0, enc.T, BLANK)
    # frames after the boundary see blank inputs only in ``run``; compare the shared prefix
    assert np.allclose(logits[:2], z[:2], atol=1e-14)
    assert len(states) == enc.T
