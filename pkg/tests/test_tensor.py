import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from passseg import tensor as T
from passseg.gradcheck import check_gradients
from passseg.tensor import ContractError, ShapeError, Tensor


def conv_loops(x, k, b=None, pad=1):
    """Direct nested-loop cross-correlation, float64."""
    n, h, w, cin = x.shape
    kk, _, _, cout = k.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = h + 2 * pad - kk + 1, w + 2 * pad - kk + 1
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kk):
                        for dj in range(kk):
                            for c in range(cin):
                                acc += xp[s, i + di, j + dj, c] * k[di, dj, c, o]
                    out[s, i, j, o] = acc + (0.0 if b is None else b[o])
    return out


def maxpool_loops(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for s in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    out[s, i, j, ch] = max(x[s, 2 * i + a, 2 * j + bb, ch] for a in (0, 1) for bb in (0, 1))
    return out


# --- conv2d ---------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.ones((1, 3, 3, 1), np.float32)
    k = np.zeros((3, 3, 1, 1), np.float32)
    k[1, 1] = 1
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_kernel_small():
    x = np.array([[1, 2], [3, 4]], np.float32).reshape(1, 2, 2, 1)
    out = T.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))))
    # every 3x3 window around a 2x2 image covers all four pixels
    np.testing.assert_allclose(out.data[0, ..., 0], [[10, 10], [10, 10]])
    np.testing.assert_allclose(out.data, conv_loops(x, np.ones((3, 3, 1, 1))))


@pytest.mark.parametrize("seed", range(3))
def test_conv_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 6, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, conv_loops(x, k, b),
                               rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), padding="valid").data,
                               conv_loops(x, k, pad=0), rtol=1e-5, atol=1e-5)


def test_conv_1x1_matches_loops():
    rng = np.random.default_rng(7)
    x, k = rng.normal(size=(1, 3, 3, 4)), rng.normal(size=(1, 1, 4, 2))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, conv_loops(x, k, pad=0), rtol=1e-5, atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_conv_rejects_stride_and_even_kernel():
    x = Tensor(np.zeros((1, 4, 4, 1)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((3, 3, 1, 1))), stride=2)
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((2, 2, 1, 1))))


def test_conv_gradient_of_sum():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 2)))
    k = Tensor(rng.uniform(-1, 1, (3, 3, 2, 3)))
    assert check_gradients(lambda: T.sum_(T.conv2d(x, k)), [x, k]) < 1e-2


# --- pooling / upsampling -------------------------------------------------

def test_maxpool_small_and_ties():
    out = T.maxpool2(Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 2, 2, 1)))
    assert out.data.item() == 4.0
    x = Tensor(np.full((1, 4, 4, 1), 3.0), requires_grad=True)
    y = T.maxpool2(x)
    np.testing.assert_array_equal(y.data, 3.0)
    T.backward(T.sum_(y))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, ..., 0], expected)


def test_maxpool_matches_loops():
    x = np.random.default_rng(3).normal(size=(1, 8, 8, 2)).astype(np.float32)
    np.testing.assert_array_equal(T.maxpool2(Tensor(x)).data, maxpool_loops(x).astype(np.float32))


def test_pool_odd_extent():
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor(np.zeros((1, 3, 4, 1))))
    with pytest.raises(ShapeError):
        T.avgpool2(Tensor(np.zeros((1, 4, 5, 1))))


def test_upsample_values_and_gradient():
    x = Tensor(np.array([[[[1.0]]]]), requires_grad=True)
    y = T.upsample2(x)
    np.testing.assert_array_equal(y.data[0, ..., 0], [[1, 1], [1, 1]])
    x2 = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 2)), requires_grad=True)
    T.backward(T.sum_(T.upsample2(x2)))
    np.testing.assert_array_equal(x2.grad, 4.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_maxpool_inverts_upsample(x):
    np.testing.assert_array_equal(T.maxpool2(T.upsample2(Tensor(x))).data, x)


# --- normalisation / activations ------------------------------------------

def test_instance_norm_constant_and_moments():
    ones, zeros = Tensor(np.ones(1)), Tensor(np.zeros(1))
    out = T.instance_norm(Tensor(np.full((1, 2, 2, 1), 5.0)), ones, zeros)
    np.testing.assert_array_equal(out.data, 0.0)
    out = T.instance_norm(Tensor(np.array([1, 2, 3, 4], np.float32).reshape(1, 2, 2, 1)), ones, zeros)
    assert abs(out.data.mean()) < 1e-4
    assert abs(out.data.var() - 1.0) < 1e-4


def test_instance_norm_per_sample_channel():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(3, 4, 5, 2))
    out = T.instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(1, 2)), 1.0, atol=1e-3)


def test_leaky_relu_values_and_subgradient():
    x = Tensor(np.array([1.0, -1.0, 0.0]), requires_grad=True)
    y = T.leaky_relu(x, 0.2)
    np.testing.assert_allclose(y.data, [1.0, -0.2, 0.0])
    T.backward(T.sum_(y))
    np.testing.assert_allclose(x.grad, [1.0, 0.2, 0.2])


def test_dense_examples():
    x = np.random.default_rng(0).normal(size=(3, 4))
    out = T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, x, rtol=1e-6)
    out = T.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
    assert out.data.tolist() == [[4.0]]
    with pytest.raises(ShapeError):
        T.dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 1))), Tensor(np.zeros(1)))


def test_sigmoid_softmax_examples():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    out = T.softmax_channel(Tensor(np.zeros((1, 2, 2, 2))))
    np.testing.assert_allclose(out.data, 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (1, 3, 3, 4), elements=st.floats(-50, 50, width=32)))
def test_softmax_sums_to_one(x):
    s = T.softmax_channel(Tensor(x)).data.sum(axis=-1)
    np.testing.assert_allclose(s, 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, 8, elements=st.floats(-1e4, 1e4, width=32)))
def test_sigmoid_open_interval(x):
    y = T.sigmoid(Tensor(x)).data
    assert np.all(y > 0) and np.all(y < 1)


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(0)
    y = T.dropout(Tensor(np.ones((200, 200))), 0.25, rng).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.75)}
    assert abs(y.mean() - 1.0) < 0.02
    np.testing.assert_array_equal(T.dropout(Tensor(np.ones(5)), 0.0, rng).data, 1.0)


# --- graph / backward -----------------------------------------------------

def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_backward_reverse_append_order():
    x = Tensor(np.array([0.5, -0.3]), requires_grad=True)
    a = T.mul(x, 3.0)
    b = T.sigmoid(a)
    c = T.add(b, a)
    loss = T.sum_(c)
    visited = []
    for t in (a, b, c, loss):
        fn = t.node.backward_fn
        t.node.backward_fn = (lambda f, s: lambda g: (visited.append(s), f(g))[1])(fn, t.node.seq)
    T.backward(loss)
    assert visited == sorted(visited, reverse=True) and len(visited) == 4
    assert a.node.seq < b.node.seq < c.node.seq < loss.node.seq


def test_gradients_accumulate_over_shared_paths():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.backward(T.sum_(T.add(T.mul(x, x), x)))
    assert x.grad.tolist() == [5.0]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y.node is None and not y.requires_grad
    assert T.grad_enabled()


def test_forward_determinism():
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(3, 3, 3, 5))
    a = T.instance_norm(T.conv2d(Tensor(x), Tensor(k)), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    b = T.instance_norm(T.conv2d(Tensor(x), Tensor(k)), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    assert a.tobytes() == b.tobytes()


def test_float32_everywhere():
    x = Tensor(np.arange(4, dtype=np.float64).reshape(1, 2, 2, 1), requires_grad=True)
    y = T.sum_(T.upsample2(x))
    T.backward(y)
    assert x.data.dtype == np.float32 and y.data.dtype == np.float32 and x.grad.dtype == np.float32
