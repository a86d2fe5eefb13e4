import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segatt import grad as G
from conftest import check_op_grad, rel_err


def arr(rng, *shape):
    return rng.normal(size=shape)


def test_linear_grads(rng):
    check_op_grad(lambda x, W, b: G.linear(x, W, b), [arr(rng, 5, 3), arr(rng, 3, 4), arr(rng, 4)])
    check_op_grad(lambda x, W: G.linear(x, W), [arr(rng, 3), arr(rng, 3, 2)])
    check_op_grad(lambda x, w, b: G.linear(x, w, b), [arr(rng, 6, 3), arr(rng, 3), arr(rng, 1)])


def test_linear_rejects_bad_shapes(rng):
    with pytest.raises(G.DimensionError):
        G.linear(G.Tensor(arr(rng, 3)), G.Tensor(arr(rng, 4, 2)))


def test_elementwise_grads(rng):
    for op in (G.tanh_op, G.sigmoid_op, G.exp_op, G.log_sigmoid, G.neg):
        check_op_grad(op, [arr(rng, 4, 3)])
    check_op_grad(G.add, [arr(rng, 4, 3), arr(rng, 3)])
    check_op_grad(lambda a: G.scale(a, 2.5), [arr(rng, 3)])
    check_op_grad(lambda a, b, c: G.add_n([a, b, c]), [arr(rng, 2), arr(rng, 2), arr(rng, 2)])


def test_structural_grads(rng):
    check_op_grad(lambda a, b: G.concat([a, b]), [arr(rng, 3), arr(rng, 2)])
    check_op_grad(lambda a, b: G.stack([a, b]), [arr(rng, 3), arr(rng, 3)])
    check_op_grad(lambda x: G.slice_rows(x, 1, 4), [arr(rng, 5, 2)])
    check_op_grad(G.reverse_rows, [arr(rng, 5, 2)])
    check_op_grad(lambda t: G.embed(t, 2), [arr(rng, 4, 3)])
    check_op_grad(lambda x: G.pick(x, 1), [arr(rng, 3)])
    check_op_grad(G.total, [arr(rng, 3, 2)])


def test_normalisation_grads(rng):
    check_op_grad(G.softmax_op, [arr(rng, 5)])
    check_op_grad(lambda e: G.softmax_op(e, np.array([1, 0, 1, 1, 0], bool)), [arr(rng, 5)])
    check_op_grad(G.log_softmax, [arr(rng, 3, 5)])
    check_op_grad(G.maxout_op, [arr(rng, 6)])
    check_op_grad(lambda x: G.maxpool_time(x, 3), [arr(rng, 7, 2)])


def test_softmax_mask_zero_and_all_masked(rng):
    p = G.softmax_op(G.Tensor(arr(rng, 4)), np.array([1, 0, 1, 0], bool)).data
    assert p[1] == 0 and p[3] == 0
    assert abs(p.sum() - 1) < 1e-12
    with pytest.raises(G.InvalidMaskError):
        G.softmax_op(G.Tensor(arr(rng, 3)), np.zeros(3, bool))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    p = G.softmax_op(G.Tensor(np.array(values))).data
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0)


def test_maxout_tie_goes_to_lower_index():
    x = G.Tensor(np.array([1.0, 1.0, 2.0, 3.0]), requires_grad=True)
    with G.Tape() as tape:
        y = G.maxout_op(x)
        loss = G.total(y)
    tape.backward(loss)
    assert y.data.tolist() == [1.0, 3.0]
    assert x.grad.tolist() == [1.0, 0.0, 0.0, 1.0]


def test_maxout_odd_dim_rejected():
    with pytest.raises(G.DimensionError):
        G.maxout_op(G.Tensor(np.zeros(3)))


def test_maxpool_drops_remainder():
    x = G.Tensor(np.arange(14.0).reshape(7, 2))
    y = G.maxpool_time(x, 3)
    assert y.shape == (2, 2)
    assert y.data[1].tolist() == [10.0, 11.0]


def _lstm_params(rng, n_in, d):
    return G.LSTMParams(G.Parameter("W_x", arr(rng, n_in, 4 * d)), G.Parameter("W_h", arr(rng, d, 4 * d)),
                        G.Parameter("b", arr(rng, 4 * d)))


def test_lstm_scan_matches_stepwise(rng):
    params = _lstm_params(rng, 3, 4)
    xs = arr(rng, 6, 3)
    for reverse in (False, True):
        seq = G.lstm_sequence(G.Tensor(xs), params, reverse=reverse).data
        h = c = G.Tensor(np.zeros(4))
        rows = []
        order = range(5, -1, -1) if reverse else range(6)
        for t in order:
            h, c = G.lstm_step(G.Tensor(xs[t]), (h, c), params)
            rows.append(h.data)
        if reverse:
            rows.reverse()
        assert np.allclose(seq, np.stack(rows), atol=1e-14)


def test_lstm_scan_and_cell_grads(rng):
    for reverse in (False, True):
        check_op_grad(lambda zx, W: G.lstm_scan(zx, W, reverse), [arr(rng, 5, 8), 0.5 * arr(rng, 2, 8)])
    check_op_grad(lambda z, h, c, W: G.concat(list(G.lstm_cell(z, h, c, W))),
                  [arr(rng, 8), arr(rng, 2), arr(rng, 2), arr(rng, 2, 8)])


def test_split_rows_grads(rng):
    check_op_grad(lambda x: G.add_n([G.scale(r, k + 1.0) for k, r in enumerate(G.split_rows(x))]), [arr(rng, 3, 2)])


def test_no_recording_outside_tape(rng):
    x = G.Tensor(arr(rng, 3), requires_grad=True)
    y = G.tanh_op(x)
    assert not y.requires_grad


def test_backward_needs_scalar(rng):
    x = G.Tensor(arr(rng, 3), requires_grad=True)
    with G.Tape() as tape:
        y = G.tanh_op(x)
    with pytest.raises(G.DimensionError):
        tape.backward(y)


def test_adam_first_step_moves_by_lr():
    p = G.Parameter("w", np.array([1.0, -2.0]))
    mom = G.AdamMoments()
    G.adam_step([p], {"w": np.array([0.3, -5.0])}, mom, G.AdamHyper(lr=0.1))
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-6)
    assert mom.step == 1


def test_adam_skips_frozen_params():
    p = G.Parameter("w", np.ones(2), trainable=False)
    G.adam_step([p], {"w": np.ones(2)}, G.AdamMoments(), G.AdamHyper())
    assert p.data.tolist() == [1.0, 1.0]


@given(st.floats(0.1, 10), st.lists(st.floats(-100, 100), min_size=1, max_size=6))
def test_clip_by_global_norm(max_norm, values):
    grads = {"a": np.array(values)}
    before = np.linalg.norm(values)
    G.clip_by_global_norm(grads, max_norm)
    after = np.linalg.norm(grads["a"])
    assert after <= max(max_norm, before) * (1 + 1e-12)
    if before <= max_norm:
        assert np.array_equal(grads["a"], np.array(values))


def test_numerical_grad_on_quadratic():
    x = np.array([1.0, 2.0, -3.0])
    g = G.numerical_grad(lambda: float((x**2).sum()), x)
    assert rel_err(g, 2 * x) < 1e-9
    assert x.tolist() == [1.0, 2.0, -3.0]


def test_five_point_stencil_more_accurate():
    x = np.array([0.3, -1.2])
    exact = np.cos(x)
    f = lambda: float(np.sin(x).sum())
    three = G.numerical_grad(f, x, 1e-2)
    five = G.numerical_grad(f, x, 1e-2, points=5)
    assert rel_err(five, exact) < rel_err(three, exact) / 100
    with pytest.raises(ValueError):
        G.numerical_grad(f, x, points=4)
