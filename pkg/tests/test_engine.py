import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixpath import engine as E

import gradcheck as G


# ---- conv2d ----------------------------------------------------------------

def test_conv2d_hand_value():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out, _ = E.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 5.0


def test_conv2d_identity_1x1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 4))
    w = np.eye(3)[:, :, None, None]
    out, _ = E.conv2d(x, w)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("h,k,s,p", [(5, 3, 1, 0), (5, 3, 2, 1), (8, 1, 2, 0), (7, 5, 1, 2), (6, 2, 3, 1)])
def test_conv2d_output_size(h, k, s, p):
    x = np.ones((1, 2, h, h))
    w = np.ones((3, 2, k, k))
    out, _ = E.conv2d(x, w, s, p)
    assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    out, _ = E.conv2d(x, w, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv2d_errors():
    with pytest.raises(E.ShapeError):
        E.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        E.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 2, 3, 3)), stride=0)
    with pytest.raises(E.NumericError):
        E.conv2d(np.full((1, 1, 2, 2), np.inf), np.ones((1, 1, 1, 1)))


def test_conv2d_gradient_reference_shape():
    # the documented 1x3x5x5 input with a 4x3x3x3 weight
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    err = G.check_op(lambda x, w: E.conv2d(x, w, 1, 0), E.conv2d_backward, [x, w], rng)
    assert err < 1e-4


# ---- depthwise ---------------------------------------------------------------

def test_depthwise_scaling():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    w = np.array([2.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1)
    out, _ = E.depthwise_conv2d(x, w)
    np.testing.assert_allclose(out[:, 0], 2 * x[:, 0], rtol=1e-6)
    np.testing.assert_allclose(out[:, 1], 3 * x[:, 1], rtol=1e-6)


def test_depthwise_hand_value():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, _ = E.depthwise_conv2d(x, np.ones((1, 1, 2, 2)))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 10.0


def test_depthwise_equals_grouped_dense_conv():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 4, 6, 6))
    w = rng.standard_normal((4, 1, 3, 3))
    out, _ = E.depthwise_conv2d(x, w, 2, 1)
    dense = np.zeros((4, 4, 3, 3))
    for c in range(4):
        dense[c, c] = w[c, 0]
    ref, _ = E.conv2d(x, dense, 2, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_depthwise_errors():
    with pytest.raises(E.ShapeError):
        E.depthwise_conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)))
    with pytest.raises(E.ShapeError):
        E.depthwise_conv2d(np.ones((1, 2, 4, 4)), np.ones((2, 2, 3, 3)))
    with pytest.raises(E.ShapeError):
        E.depthwise_conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 5, 5)))


# ---- batch norm ----------------------------------------------------------------

def test_batchnorm_normalizes():
    rng = np.random.default_rng(0)
    x = 5 + 2 * rng.standard_normal((64, 3, 4, 4))
    out, _ = E.batchnorm(x, np.ones(3), np.zeros(3), "train")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_affine():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 2, 3, 3))
    out, _ = E.batchnorm(x, np.full(2, 2.0), np.full(2, 3.0), "train", eps=0.0)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 4, rtol=1e-10)


def test_batchnorm_eval_formula():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 2, 2))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    mu, var = rng.standard_normal(3), rng.random(3) + 0.1
    out, _ = E.batchnorm(x, g, b, "eval", mu, var)
    ref = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + E.BN_EPS) * g[None, :, None, None] \
        + b[None, :, None, None]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_batchnorm_errors():
    with pytest.raises(ValueError):
        E.batchnorm(np.ones((1, 2, 3, 3)), np.ones(2), np.zeros(2), "train")
    with pytest.raises(E.ShapeError):
        E.batchnorm(np.ones((2, 2, 3, 3)), np.ones(3), np.zeros(3), "train")


def test_batchnorm_zero_variance_guarded():
    out, _ = E.batchnorm(np.full((4, 1, 2, 2), 7.0), np.ones(1), np.zeros(1), "train")
    assert np.all(out == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 5.0), st.floats(-3, 3))
def test_batchnorm_train_moments_property(seed, gamma, beta):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 2, 3, 3)) * 3 + rng.standard_normal()
    out, _ = E.batchnorm(x, np.full(2, gamma), np.full(2, beta), "train")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma ** 2, atol=1e-3 * max(1, gamma ** 2))


# ---- dense ops ---------------------------------------------------------------

def test_relu_values():
    out, _ = E.relu(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 2.0])


def test_softmax_ce_uniform():
    loss, _ = E.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        E.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_softmax_ce_extreme_logits_stay_finite():
    loss, _ = E.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_linear_shape_error():
    with pytest.raises(E.ShapeError):
        E.linear(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))


# ---- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(G.CASES))
def test_gradient_finite_difference(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        assert G.CASES[name](rng) < 1e-4


# ---- optimiser and schedule --------------------------------------------------

def test_sgd_first_and_second_step():
    p = E.Param(np.array([1.0]))
    state = {}
    p.grad = np.array([1.0])
    E.sgd_step([p], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert state[id(p)][0] == pytest.approx(1.0) and p.data[0] == pytest.approx(0.9)
    p.grad = np.array([1.0])
    E.sgd_step([p], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert state[id(p)][0] == pytest.approx(1.9) and p.data[0] == pytest.approx(0.71)


def test_sgd_zero_momentum_is_gradient_descent():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    p = E.Param(w0.copy())
    state = {}
    for _ in range(3):
        g = rng.standard_normal(5)
        p.grad = g
        expect = p.data - 0.05 * g
        E.sgd_step([p], state, 0.05, 0.0)
        np.testing.assert_allclose(p.data, expect)


def test_sgd_weight_decay_and_untouched():
    a, b = E.Param(np.array([2.0])), E.Param(np.array([5.0]))
    a.grad = np.array([0.0])
    E.sgd_step([a, b], {}, lr=0.5, momentum=0.9, weight_decay=0.1)
    assert a.data[0] == pytest.approx(2.0 - 0.5 * 0.2)
    assert b.data[0] == 5.0


def test_sgd_errors():
    p = E.Param(np.ones(2))
    p.grad = np.ones(3)
    with pytest.raises(E.ShapeError):
        E.sgd_step([p], {}, 0.1)
    with pytest.raises(ValueError):
        E.sgd_step([p], {}, 0.0)
    with pytest.raises(ValueError):
        E.sgd_step([p], {}, 0.1, momentum=1.0)


def test_param_accumulate_shape_check():
    p = E.Param(np.zeros((2, 2)))
    with pytest.raises(E.ShapeError):
        p.accumulate(np.zeros(4))
    p.accumulate(np.ones((2, 2)))
    p.accumulate(np.ones((2, 2)))
    np.testing.assert_array_equal(p.grad, 2 * np.ones((2, 2)))


def test_cosine_lr_points():
    assert E.cosine_lr(0, 100, 0.1) == pytest.approx(0.1)
    assert E.cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-15)
    assert E.cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        E.cosine_lr(101, 100, 0.1)


@given(st.integers(1, 1000), st.floats(1e-4, 10.0))
def test_cosine_lr_monotone(total, lr0):
    vals = [E.cosine_lr(s, total, lr0) for s in range(0, total + 1, max(1, total // 17))]
    assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= lr0 for v in vals)


# ---- determinism -------------------------------------------------------------

def test_ops_bit_identical_across_calls():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 8, 8)).astype(np.float32)
    w = rng.standard_normal((6, 1, 7, 7)).astype(np.float32)
    a, ca = E.depthwise_conv2d(x, w, 1, 3)
    b, cb = E.depthwise_conv2d(x, w, 1, 3)
    assert a.tobytes() == b.tobytes()
    g = rng.standard_normal(a.shape).astype(np.float32)
    da = E.depthwise_conv2d_backward(g, ca)
    db = E.depthwise_conv2d_backward(g, cb)
    assert da[0].tobytes() == db[0].tobytes() and da[1].tobytes() == db[1].tobytes()
