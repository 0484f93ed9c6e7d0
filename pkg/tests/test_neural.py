import math

import numpy as np
import pytest

from asrvc import neural as nn
from asrvc.errors import NumericError, ShapeMismatch

from conftest import away_from, gradcheck

TOL = 1e-3


rng = np.random.default_rng(123)


# -- conv1d ---------------------------------------------------------------------

def test_conv1d_identity_kernel():
    x = rng.standard_normal((3, 10)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None]
    assert np.array_equal(nn.conv1d(x, w).data, x)


def test_conv1d_dilated_hand_example():
    x = np.array([[1.0, 2.0, 3.0, 4.0]], np.float32)
    w = np.array([[[1.0, 1.0]]], np.float32)
    assert nn.conv1d(x, w, dilation=2, padding="causal").data.tolist() == [[1, 2, 4, 6]]


def test_conv1d_causal_prefix_invariance():
    x = rng.standard_normal((2, 40))
    w = rng.standard_normal((3, 2, 3))
    full = nn.conv1d(x, w, dilation=4).data
    for t in (0, 7, 25):
        cut = x.copy()
        cut[:, t + 1:] = 0
        assert np.array_equal(nn.conv1d(cut, w, dilation=4).data[:, :t + 1], full[:, :t + 1])


def test_conv1d_stride_length():
    x = rng.standard_normal((2, 99))
    w = rng.standard_normal((4, 2, 11))
    assert nn.conv1d(x, w, stride=2, padding="same").shape == (4, 50)


@pytest.mark.parametrize("stride,dilation,padding,k", [
    (1, 1, "causal", 2), (1, 4, "causal", 2), (1, 1, "same", 5), (2, 1, "same", 11), (1, 2, "same", 3),
    (2, 1, "causal", 3),
])
def test_conv1d_gradients(stride, dilation, padding, k):
    x = rng.standard_normal((3, 17))
    w = rng.standard_normal((4, 3, k))
    b = rng.standard_normal(4)
    err = gradcheck(lambda x, w, b: nn.conv1d(x, w, b, stride, dilation, padding), [x, w, b])
    assert err < TOL


def test_conv2d_gradients():
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    assert gradcheck(nn.conv2d, [x, w, b]) < TOL


def test_conv2d_matches_direct_sum():
    x = rng.standard_normal((1, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = nn.conv2d(x, w).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


# -- normalization / activations -----------------------------------------------

def test_batch_norm_train_statistics():
    x = (rng.standard_normal((4, 200)) * 3 + 5).astype(np.float32)
    out = nn.batch_norm(x, np.ones(4, np.float32), np.zeros(4, np.float32), nn.RunningStats(4), train=True).data
    assert np.allclose(out.mean(axis=1), 0, atol=1e-4)
    assert np.allclose(out.var(axis=1), 1, atol=1e-4)


def test_batch_norm_running_update():
    stats = nn.RunningStats(2)
    x = np.array([[1.0, 3.0], [10.0, 10.0]], np.float32)
    nn.batch_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32), stats, train=True)
    assert np.allclose(stats.mean, [0.2, 1.0])
    assert np.allclose(stats.var, [0.9 + 0.1, 0.9])


def test_batch_norm_eval_identity():
    x = rng.standard_normal((3, 9)).astype(np.float32)
    out = nn.batch_norm(x, np.ones(3, np.float32), np.zeros(3, np.float32), nn.RunningStats(3), train=False).data
    assert np.allclose(out, x, atol=1e-4)


@pytest.mark.parametrize("train", [True, False])
@pytest.mark.parametrize("axis", [0, 1])
def test_batch_norm_gradients(train, axis):
    shape = (3, 11) if axis == 0 else (2, 3, 4, 5)
    x = rng.standard_normal(shape)
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)

    def build(x, g, b):
        return nn.batch_norm(x, g, b, nn.RunningStats(3, mean, var), train=train, channel_axis=axis)

    assert gradcheck(build, [x, g, b]) < TOL


def test_clipped_relu_values_and_grad():
    out = nn.clipped_relu(np.array([-1.0, 5.0, 100.0])).data
    assert out.tolist() == [0.0, 5.0, 20.0]
    p = nn.Parameter(np.array([-1.0, 5.0, 100.0]))
    nn.clipped_relu(p).backward(np.ones(3))
    assert p.grad.tolist() == [0.0, 1.0, 0.0]


def test_activation_gradients():
    x = away_from(rng.standard_normal(20) * 15, [0.0, 20.0])
    assert gradcheck(nn.clipped_relu, [x]) < TOL
    assert gradcheck(nn.relu, [away_from(rng.standard_normal(20), [0.0])]) < TOL
    a, b = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    assert gradcheck(nn.gated_unit, [a, b]) < TOL


def test_gate_saturation_and_zero_filter():
    assert abs(float(nn.gated_unit(np.array([1.0]), np.array([-100.0])).data[0])) < 1e-40
    assert float(nn.gated_unit(np.array([0.0]), np.array([3.0])).data[0]) == 0.0


def test_dropout():
    x = np.ones((4, 1000), np.float32)
    eval_out = nn.dropout(x, 0.5, np.random.default_rng(0), train=False).data
    assert np.array_equal(eval_out, x)
    a = nn.dropout(x, 0.5, np.random.default_rng(0), train=True).data
    b = nn.dropout(x, 0.5, np.random.default_rng(0), train=True).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert abs(a.mean() - 1.0) < 0.05
    y = rng.standard_normal((3, 8))
    assert gradcheck(lambda y: nn.dropout(y, 0.3, np.random.default_rng(5), train=True), [y]) < TOL


# -- linear maps, reshaping -------------------------------------------------------

def test_dense_and_embedding_gradients():
    x, W, b = rng.standard_normal((5, 7)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    assert gradcheck(nn.dense, [x, W, b]) < TOL
    assert gradcheck(nn.dense, [x[:, 0], W, b]) < TOL
    table = rng.standard_normal((10, 4))
    idx = np.array([1, 3, 3, 9, 0])
    assert gradcheck(lambda t: nn.embedding(t, idx), [table]) < TOL
    assert np.array_equal(nn.embedding(table, idx).data, table[idx].T)


def test_add_broadcast_gradients():
    a, b, c = rng.standard_normal((3, 6)), rng.standard_normal((3, 1)), rng.standard_normal((3, 6))
    assert gradcheck(nn.add, [a, b, c]) < TOL


def test_structural_ops_gradients():
    x = rng.standard_normal((2, 3, 5, 4))
    assert gradcheck(lambda x: nn.max_pool_rows(x, 2), [x]) < TOL
    assert gradcheck(lambda x: nn.mean_axis(x, 3), [x]) < TOL
    assert gradcheck(lambda x: nn.reshape(x, (6, -1)), [x]) < TOL
    m = rng.standard_normal((4, 6))
    assert gradcheck(nn.transpose2d, [m]) < TOL
    assert gradcheck(lambda m: nn.take_rows(m, 1, 3), [m]) < TOL


def test_max_pool_drops_leftover_row():
    x = np.arange(15, dtype=np.float32).reshape(1, 1, 15, 1)
    out = nn.max_pool_rows(x, 2).data
    assert out.reshape(-1).tolist() == [1, 3, 5, 7, 9, 11, 13]


# -- loss -----------------------------------------------------------------------

def test_cross_entropy_examples():
    loss, grad = nn.cross_entropy_and_grad(np.zeros((256, 5)), np.arange(5))
    assert loss == pytest.approx(math.log(256), abs=1e-9)
    assert np.allclose(grad.sum(axis=0), 0, atol=1e-12)
    logits = np.zeros((256, 3))
    logits[[7, 8, 9], [0, 1, 2]] = 1000.0
    assert nn.cross_entropy_and_grad(logits, [7, 8, 9])[0] < 1e-6


def test_cross_entropy_gradient():
    logits = rng.standard_normal((6, 9))
    targets = rng.integers(0, 6, 9)
    assert gradcheck(lambda z: nn.softmax_cross_entropy(z, targets), [logits]) < TOL


def test_softmax_columns_sum_to_one():
    p = nn.softmax_array(rng.standard_normal((256, 20)) * 30)
    assert np.allclose(p.sum(axis=0), 1, atol=1e-6)


def test_non_finite_raises():
    with pytest.raises(NumericError):
        nn.relu(np.array([np.inf]))
    with pytest.raises(ShapeMismatch):
        nn.dense(np.zeros((3, 2)), np.zeros((4, 5)))


# -- optimizer --------------------------------------------------------------------

def test_adam_descends_and_ignores_zero_grad():
    w = np.array([1.0], np.float32)
    opt = nn.Adam(lr=0.1)
    opt.update("w", w, 2 * w)
    assert w[0] < 1.0
    z = np.array([0.7], np.float32)
    opt.update("z", z, np.zeros(1, np.float32))
    assert z[0] == np.float32(0.7)


def test_adam_quadratic_convergence():
    w = np.array([3.0, -2.0], np.float32)
    opt = nn.Adam(lr=0.05)
    for _ in range(500):
        opt.update("w", w, 2 * w)
    assert np.all(np.abs(w) < 1e-2)


def test_adam_per_name_isolation():
    opt = nn.Adam()
    a, b = np.ones(3, np.float32), np.ones(3, np.float32)
    opt.update("a", a, np.ones(3, np.float32))
    assert "b" not in opt.m and np.array_equal(b, np.ones(3))
