"""Layer semantics: init distributions, batch-norm modes, optimizer math."""

import numpy as np
import pytest

from gradutils import check_grad
from iterpose.diffengine import (Adam, BatchNorm2d, Conv2d, Linear, SGD,
                                 Tensor, backward, he_uniform, ops, param)

R = np.random.default_rng(7)


def test_he_uniform_bound_and_determinism():
    w1 = he_uniform(np.random.default_rng(3), (16, 8, 3, 3), fan_in=8 * 9)
    w2 = he_uniform(np.random.default_rng(3), (16, 8, 3, 3), fan_in=8 * 9)
    bound = np.sqrt(6.0 / (8 * 9))
    assert np.abs(w1).max() <= bound
    assert np.array_equal(w1, w2)
    # should actually fill the range, not hug zero
    assert np.abs(w1).max() > 0.8 * bound


def test_conv_layer_init():
    conv = Conv2d(8, 16, 3, rng=np.random.default_rng(0))
    assert conv.weight.shape == (16, 8, 3, 3)
    assert np.abs(conv.weight.data).max() <= np.sqrt(6.0 / (8 * 9)) + 1e-7
    assert np.array_equal(conv.bias.data, np.zeros(16))


def test_linear_layer_shapes():
    lin = Linear(6, 4, rng=np.random.default_rng(0))
    y = lin(Tensor(R.normal(size=(3, 6))))
    assert y.shape == (3, 4)
    assert np.abs(lin.weight.data).max() <= np.sqrt(6.0 / 6) + 1e-7


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def test_bn_train_normalizes_with_biased_variance():
    bn = BatchNorm2d(3)
    x = R.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 5)).astype(np.float32)
    y = bn(Tensor(x)).data
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased
    ref = (x - mu[:, None, None]) / np.sqrt(var[:, None, None] + 1e-5)
    assert np.allclose(y, ref, atol=1e-5)


def test_bn_running_stats_use_unbiased_variance():
    bn = BatchNorm2d(2)
    x = R.normal(size=(4, 2, 3, 3)).astype(np.float32)
    bn(Tensor(x))
    count = 4 * 9
    mu = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3)) * count / (count - 1)
    assert np.allclose(bn.running_mean, 0.1 * mu, atol=1e-6)
    assert np.allclose(bn.running_var, 0.9 * 1.0 + 0.1 * var_unbiased, atol=1e-5)


def test_bn_eval_uses_running_stats():
    bn = BatchNorm2d(2)
    x = R.normal(size=(8, 2, 4, 4)).astype(np.float32)
    for _ in range(30):
        bn(Tensor(x))
    bn.training = False
    y = bn(Tensor(x)).data
    ref = (x - bn.running_mean[:, None, None]) / np.sqrt(
        bn.running_var[:, None, None] + 1e-5)
    assert np.allclose(y, ref, atol=1e-4)


def test_bn_rejects_single_element_batch_in_train():
    bn = BatchNorm2d(2)
    with pytest.raises(ValueError):
        bn(Tensor(np.ones((1, 2, 1, 1), dtype=np.float32)))


def test_bn_frozen_keeps_stats():
    bn = BatchNorm2d(2)
    bn(Tensor(R.normal(size=(4, 2, 3, 3)).astype(np.float32)))
    saved_m = bn.running_mean.copy()
    bn.frozen = True
    bn.training = False
    bn(Tensor(R.normal(size=(4, 2, 3, 3)).astype(np.float32)))
    assert np.array_equal(bn.running_mean, saved_m)


def test_bn_gradcheck_train_mode():
    x = R.normal(size=(3, 2, 3, 3))
    g = R.normal(size=(2,))
    b = R.normal(size=(2,))

    def loss(p):
        bn = BatchNorm2d(2, dtype=np.float64)
        bn.gamma, bn.beta = p[1], p[2]
        return ops.sum_(ops.sin(bn(p[0])))

    assert check_grad(loss, [x, g, b]) < 1e-4


def test_conv_bn_relu_stack_gradcheck():
    x = R.normal(size=(2, 2, 5, 5))
    w = R.normal(size=(3, 2, 3, 3)) * 0.4
    g = R.normal(size=(3,)) + 1.5
    b = R.normal(size=(3,))

    def loss(p):
        bn = BatchNorm2d(3, dtype=np.float64)
        bn.gamma, bn.beta = p[2], p[3]
        h = ops.conv2d(p[0], p[1], None, stride=2, padding=1)
        return ops.sum_(ops.relu(bn(h)))

    assert check_grad(loss, [x, w, g, b]) < 1e-4


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def test_sgd_momentum_hand_step():
    w = param(np.array([1.0, 2.0], dtype=np.float32))
    opt = SGD([w], lr=0.1, momentum=0.9)
    w.grad = np.array([1.0, -2.0], dtype=np.float32)
    opt.step()
    assert np.allclose(w.data, [1.0 - 0.1, 2.0 + 0.2])
    w.grad = np.array([1.0, -2.0], dtype=np.float32)
    opt.step()
    # velocity = 0.9*v + g -> 1.9; step = lr * 1.9
    assert np.allclose(w.data, [0.9 - 0.19, 2.2 + 0.38], atol=1e-6)


def test_adam_matches_closed_form():
    w = param(np.array([0.5], dtype=np.float32))
    opt = Adam([w], lr=0.01)
    g = 0.3
    m = v = 0.0
    x = 0.5
    for t in range(1, 4):
        w.grad = np.array([g], dtype=np.float32)
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        x = x - 0.01 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(w.data, [x], atol=1e-6)


def test_optimizer_groups_use_their_own_lr():
    a = param(np.array([1.0], dtype=np.float32))
    b = param(np.array([1.0], dtype=np.float32))
    opt = Adam([{"params": [a], "lr": 0.1}, {"params": [b], "lr": 0.001}], lr=0.5)
    a.grad = np.array([1.0], dtype=np.float32)
    b.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    da, db = 1.0 - a.data[0], 1.0 - b.data[0]
    assert da > 50 * db


def test_zero_grad_clears():
    w = param(np.ones(2, dtype=np.float32))
    opt = SGD([w], lr=0.1)
    w.grad = np.ones(2, dtype=np.float32)
    opt.zero_grad()
    assert w.grad is None


def test_adam_state_round_trip():
    w = param(np.array([1.0, 2.0], dtype=np.float32))
    opt = Adam([w], lr=0.05)
    for _ in range(3):
        w.grad = np.array([0.1, -0.2], dtype=np.float32)
        opt.step()
    arrays = opt.state_arrays()
    w2 = param(np.array(w.data))
    opt2 = Adam([w2], lr=0.05)
    opt2.load_state_arrays([a.copy() for a in arrays])
    w.grad = np.array([0.3, 0.1], dtype=np.float32)
    w2.grad = np.array([0.3, 0.1], dtype=np.float32)
    opt.step()
    opt2.step()
    assert np.allclose(w.data, w2.data, atol=1e-7)
