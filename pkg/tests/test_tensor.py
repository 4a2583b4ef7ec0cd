"""Gradient checks for every primitive plus tape mechanics.

All checks run in float64 with h=1e-5 central differences and must stay
below 1e-4 relative error.
"""

import numpy as np
import pytest

from gradutils import check_grad
from iterpose.diffengine import Tensor, backward, no_grad, ops, param

TOL = 1e-4
R = np.random.default_rng(1234)


def scalar_sum(t):
    return ops.sum_(t)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def test_add_sub_mul_div_grads():
    a = R.normal(size=(3, 4))
    b = R.normal(size=(3, 4)) + 3.0
    err = check_grad(lambda p: scalar_sum((p[0] + p[1]) * p[0] - p[0] / p[1]),
                     [a, b])
    assert err < TOL


def test_broadcast_grads():
    a = R.normal(size=(3, 1))
    b = R.normal(size=(1, 4))
    err = check_grad(lambda p: scalar_sum(p[0] + p[1] * 2.0 + p[0] * p[1]), [a, b])
    assert err < TOL


def test_scalar_operand_grads():
    a = R.normal(size=(5,))
    err = check_grad(lambda p: scalar_sum(2.0 * p[0] + 1.0 - p[0] * 0.5), [a])
    assert err < TOL


@pytest.mark.parametrize("fn", [
    ops.exp,
    ops.sin,
    ops.cos,
    ops.sigmoid,
    lambda t: ops.log(t + 5.0),
    lambda t: ops.sqrt(t + 5.0),
    lambda t: ops.pow_(t + 5.0, 1.7),
    lambda t: -t,
])
def test_unary_grads(fn):
    a = R.normal(size=(4, 3))
    assert check_grad(lambda p: scalar_sum(fn(p[0])), [a]) < TOL


def test_relu_grad_off_kink():
    a = R.normal(size=(6, 6))
    a[np.abs(a) < 1e-2] = 0.5
    assert check_grad(lambda p: scalar_sum(ops.relu(p[0])), [a]) < TOL


def test_clamp_grad_interior_and_edges():
    a = np.array([-2.0, -0.3, 0.4, 2.5])
    err = check_grad(lambda p: scalar_sum(ops.clamp(p[0], -1.0, 1.0) * p[0]), [a])
    assert err < TOL
    t = param(a)
    backward(ops.sum_(ops.clamp(t, -1.0, 1.0)))
    assert np.array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])


def test_smooth_l1_values_and_grad():
    x = np.array([-3.0, -0.5, 0.2, 2.0])
    t = param(x)
    y = ops.smooth_l1(t)
    expect = np.where(np.abs(x) <= 1, 0.5 * x * x, np.abs(x) - 0.5)
    assert np.allclose(y.data, expect)
    a = R.normal(size=(8,)) * 2
    a[np.abs(np.abs(a) - 1.0) < 1e-2] = 0.3
    assert check_grad(lambda p: scalar_sum(ops.smooth_l1(p[0])), [a]) < TOL


def test_softmax_temperature_and_log_softmax_grads():
    a = R.normal(size=(3, 5))
    w = R.normal(size=(3, 5))
    err = check_grad(
        lambda p: scalar_sum(ops.softmax_temperature(p[0], 0.7) * p[1]), [a, w])
    assert err < TOL
    err = check_grad(
        lambda p: scalar_sum(ops.log_softmax(p[0], 1.3) * p[1]), [a, w])
    assert err < TOL


def test_softmax_rows_sum_to_one():
    t = Tensor(R.normal(size=(4, 7)) * 30)
    s = ops.softmax_temperature(t, 2.0)
    assert np.allclose(s.data.sum(axis=1), 1.0)
    assert (s.data > 0).all()


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def test_matmul_grads():
    a = R.normal(size=(3, 4))
    b = R.normal(size=(4, 2))
    assert check_grad(lambda p: scalar_sum(ops.matmul(p[0], p[1])), [a, b]) < TOL


def test_batched_matmul_broadcast_grads():
    a = R.normal(size=(5, 3, 4))
    b = R.normal(size=(4, 2))
    err = check_grad(lambda p: scalar_sum(ops.matmul(p[0], p[1])), [a, b])
    assert err < TOL


def test_linear_grad():
    x = R.normal(size=(4, 6))
    w = R.normal(size=(6, 3))
    b = R.normal(size=(3,))
    assert check_grad(lambda p: scalar_sum(ops.linear(p[0], p[1], p[2])),
                      [x, w, b]) < TOL


def test_reshape_transpose_concat_getitem_grads():
    a = R.normal(size=(2, 6))
    b = R.normal(size=(3, 4))
    def loss(p):
        x = ops.reshape(p[0], (3, 4))
        y = ops.transpose(ops.concat([x, p[1]], axis=0), (1, 0))
        return ops.sum_(y[1:3, 2:] * y[0:2, :4])
    assert check_grad(loss, [a, b]) < TOL


def test_sum_mean_axis_grads():
    a = R.normal(size=(3, 4, 2))
    def loss(p):
        return ops.sum_(ops.mean(p[0], axis=1) * ops.sum_(p[0], axis=(0, 1)))
    assert check_grad(loss, [a]) < TOL


def test_mean_keepdims_value():
    t = Tensor(np.arange(12.0).reshape(3, 4))
    m = ops.mean(t, axis=1, keepdims=True)
    assert m.shape == (3, 1)
    assert np.allclose(m.data[:, 0], [1.5, 5.5, 9.5])


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_grads(stride, padding):
    x = R.normal(size=(2, 3, 6, 6))
    w = R.normal(size=(4, 3, 3, 3)) * 0.5
    b = R.normal(size=(4,))
    err = check_grad(
        lambda p: scalar_sum(ops.conv2d(p[0], p[1], p[2], stride, padding)),
        [x, w, b])
    assert err < TOL


def test_conv2d_matches_direct_computation():
    x = R.normal(size=(1, 2, 5, 5))
    w = R.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), None, 1, 0).data
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref = (x[0, :, i:i + 3, j:j + 3] * w[o]).sum()
                assert abs(out[0, o, i, j] - ref) < 1e-10


def test_max_pool_grad_routes_to_argmax():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    t = param(x)
    y = ops.max_pool2d(t, 2)
    backward(ops.sum_(y))
    expect = np.zeros((1, 1, 4, 4))
    expect[0, 0, 1::2, 1::2] = 1.0
    assert np.array_equal(t.grad, expect)
    a = R.normal(size=(2, 2, 6, 6))
    assert check_grad(lambda p: scalar_sum(ops.max_pool2d(p[0], 2)), [a]) < TOL


def test_global_avg_pool():
    x = R.normal(size=(2, 3, 4, 4))
    t = Tensor(x)
    assert np.allclose(ops.global_avg_pool(t).data, x.mean(axis=(2, 3)))
    assert check_grad(lambda p: scalar_sum(ops.global_avg_pool(p[0])), [x]) < TOL


def test_pixel_shuffle_index_law():
    n, c, h, w, r = 2, 3, 2, 2, 2
    x = R.normal(size=(n, c * r * r, h, w))
    y = ops.pixel_shuffle(Tensor(x), r).data
    assert y.shape == (n, c, h * r, w * r)
    for cc in range(c):
        for a in range(r):
            for b in range(r):
                assert np.array_equal(y[:, cc, a::r, b::r],
                                      x[:, cc * r * r + a * r + b])


def test_pixel_shuffle_space_to_depth_inverse():
    x = R.normal(size=(2, 8, 3, 3))
    t = Tensor(x)
    back = ops.space_to_depth(ops.pixel_shuffle(t, 2), 2)
    assert np.array_equal(back.data, x)
    w = R.normal(size=(2, 2, 6, 6))
    assert check_grad(
        lambda p: scalar_sum(ops.pixel_shuffle(p[0], 2) * p[1]), [x, w]) < TOL


def test_nearest_upsample():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    y = ops.nearest_upsample(Tensor(x), 2).data
    assert y.shape == (1, 1, 4, 4)
    assert np.array_equal(y[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1],
                                    [2, 2, 3, 3], [2, 2, 3, 3]])
    a = R.normal(size=(1, 2, 3, 3))
    assert check_grad(lambda p: scalar_sum(ops.nearest_upsample(p[0], 3)), [a]) < TOL


# ---------------------------------------------------------------------------
# tape mechanics and dtypes
# ---------------------------------------------------------------------------

def test_untracked_inputs_get_no_grad():
    x = Tensor(np.ones(3))
    w = param(np.ones(3))
    backward(ops.sum_(x * w))
    assert x.grad is None
    assert np.array_equal(w.grad, np.ones(3))


def test_no_grad_blocks_recording():
    w = param(np.ones(3))
    with no_grad():
        y = ops.sum_(w * 2.0)
    assert not y.tracked
    with pytest.raises(RuntimeError):
        backward(y)


def test_backward_needs_scalar():
    w = param(np.ones((2, 2)))
    with pytest.raises(ValueError):
        backward(w * 2.0)


def test_grad_accumulates_across_uses():
    w = param(np.array([3.0]))
    backward(ops.sum_(w * w + w))
    assert np.allclose(w.grad, [7.0])


def test_dtype_rules():
    assert Tensor(np.ones(2, dtype=np.int64)).data.dtype == np.float32
    assert Tensor(np.ones(2, dtype=np.float64)).data.dtype == np.float64
    assert Tensor(np.ones(2, dtype=np.float32)).data.dtype == np.float32
    assert param(np.ones(2, dtype=np.float64)).data.dtype == np.float64


def test_float32_stays_float32_through_ops():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    y = ops.sigmoid(ops.exp(x * 0.5) + 1.0)
    assert y.data.dtype == np.float32
