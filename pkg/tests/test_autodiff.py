import numpy as np
import pytest
import scipy.sparse as sp

from polyagglo import autodiff as ad
from polyagglo.autodiff import Adam, AttentionalAggregation, Dense, Parameter, SageConv, Tensor, sage_conv


def numeric_grad(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn()
        x[idx] = old - h
        down = fn()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check_grads(loss_fn, params):
    """Compare analytic gradients of a scalar loss with central differences."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    for p in params:
        num = numeric_grad(lambda: float(loss_fn().data), p.data)
        np.testing.assert_allclose(p.grad, num, rtol=1e-4, atol=1e-7)


def mean_adj(n, edges):
    i, j = np.array(edges).T
    a = sp.coo_matrix((np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    deg = np.asarray(a.sum(1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    return sp.diags(inv) @ a


def test_sage_conv_examples():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    eye, zero = np.eye(2), np.zeros((2, 2))
    adj = mean_adj(2, [(0, 1)])
    np.testing.assert_allclose(sage_conv(x, adj, eye, zero, np.zeros((1, 2))).data, x.data)
    np.testing.assert_allclose(sage_conv(x, adj, zero, eye, np.zeros((1, 2))).data, x.data[::-1])
    np.testing.assert_allclose(sage_conv(x, adj, zero, zero, np.zeros((1, 2))).data, 0)
    # isolated node aggregates zeros
    lone = sp.csr_matrix((2, 2))
    np.testing.assert_allclose(sage_conv(x, lone, zero, eye, np.zeros((1, 2))).data, 0)
    with pytest.raises(ValueError):
        sage_conv(Tensor(np.ones((2, 3))), adj, eye, zero, np.zeros((1, 2)))


def test_attentional_aggregation_examples(rng):
    layer = AttentionalAggregation(3, 4, rng)
    row = rng.random((1, 3))
    np.testing.assert_allclose(layer(Tensor(row)).data, layer.transform(Tensor(row)).data)
    same = np.repeat(row, 5, axis=0)
    np.testing.assert_allclose(layer(Tensor(same)).data, layer.transform(Tensor(row)).data)
    assert layer(Tensor(rng.random((9, 3)))).shape == (1, 4)


def test_backward_examples():
    w = Parameter(np.array([[2.0], [-1.0]]))
    x = Tensor(np.array([[1.0, 3.0]]))
    ad.total(x @ w).backward()
    np.testing.assert_allclose(w.grad, [[1.0], [3.0]])
    z = Parameter(np.zeros((1, 1)))
    t = ad.tanh(z)
    ad.total(t * t).backward()
    assert z.grad[0, 0] == 0.0


def test_fan_out_accumulates():
    a = Parameter(np.array([[3.0]]))
    ad.total(a * a + a).backward()
    assert a.grad[0, 0] == pytest.approx(7.0)


def test_non_scalar_backward_raises():
    with pytest.raises(ValueError):
        (Parameter(np.ones((2, 2))) * 2.0).backward()


def test_softmax_rows_sum_to_one(rng):
    s = ad.softmax_rows(Tensor(rng.normal(size=(6, 3)) * 50))
    np.testing.assert_allclose(s.data.sum(1), 1.0)
    assert np.all(s.data >= 0)


def test_masked_log_softmax():
    x = Tensor(np.array([[0.0], [1.0], [2.0]]))
    out = ad.masked_log_softmax_nodes(x, [True, False, True])
    assert np.isneginf(out.data[1, 0])
    np.testing.assert_allclose(np.exp(out.data[[0, 2], 0]).sum(), 1.0)
    with pytest.raises(ValueError):
        ad.masked_log_softmax_nodes(x, [False] * 3)


def test_elementwise_grads(rng):
    a = Parameter(rng.normal(size=(4, 3)))
    b = Parameter(rng.uniform(0.5, 2.0, size=(1, 3)))
    c = Parameter(rng.uniform(0.5, 2.0, size=(4, 3)))
    check_grads(lambda: ad.total(ad.tanh(a * b + a / c - b)), [a, b, c])
    check_grads(lambda: ad.mean(ad.log(c) * a), [a, c])
    check_grads(lambda: ad.total(ad.total(a * a, axis=0, keepdims=True) * b), [a, b])
    check_grads(lambda: ad.total(ad.total(a, axis=1) * ad.total(c, axis=1)), [a, c])
    check_grads(lambda: ad.total((2.0 - a) / (1.0 + c)), [a, c])


def test_matrix_grads(rng):
    a = Parameter(rng.normal(size=(5, 3)))
    w = Parameter(rng.normal(size=(3, 2)))
    m = sp.random(5, 5, density=0.4, random_state=1, format="csr")
    target = rng.normal(size=(5, 2))
    mix = rng.normal(size=(5, 5))
    check_grads(lambda: ad.total(ad.spmm(m, a @ w) * target), [a, w])
    check_grads(lambda: ad.total(ad.softmax_rows(a @ w) * target), [a, w])
    check_grads(lambda: ad.total(ad.softmax_nodes(a @ w) * target), [a, w])
    check_grads(lambda: ad.total(ad.concat_cols([a, a @ w]) * mix), [a, w])
    check_grads(lambda: ad.total(ad.gather_rows(a, [0, 2, 2, 4]) @ w * target[:4]), [a, w])
    v = Parameter(rng.normal(size=(3, 1)))
    allowed = np.array([True, False, True, True, False])
    check_grads(lambda: ad.total(ad.gather_rows(ad.masked_log_softmax_nodes(a @ v, allowed), [0, 3])), [a, v])


def test_layer_grads(rng):
    x = Parameter(rng.normal(size=(6, 3)))
    adj = mean_adj(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3)])
    target = rng.normal(size=(6, 4))
    dense, conv = Dense(3, 4, rng), SageConv(3, 4, rng)
    pool = AttentionalAggregation(3, 2, rng)
    check_grads(lambda: ad.total(ad.tanh(dense(x)) * target), [x] + dense.parameters())
    check_grads(lambda: ad.total(ad.tanh(conv(x, adj)) * target), [x] + conv.parameters())
    check_grads(lambda: ad.total(pool(x) * np.array([[1.0, -2.0]])), [x] + pool.parameters())
    assert [k for k, _ in conv.named_parameters()] == ["w_self", "w_neigh", "bias"]


def test_adam_examples():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    # first step moves each coordinate by about lr against the gradient sign
    q = Parameter(np.array([1.0, -2.0]))
    Adam([q], lr=0.1).step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(q.data, [0.9, -1.9], atol=1e-6)
    r = Parameter(np.array([2.0, 4.0]))
    Adam([r], lr=0.1, weight_decay=0.5).step([np.zeros(2)])
    np.testing.assert_allclose(r.data, np.array([2.0, 4.0]) * (1 - 0.1 * 0.5))


def test_adam_minimises_quadratic():
    p = Parameter(np.array([[3.0, -1.0]]))
    opt = Adam([p], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        ad.total((p - 1.0) * (p - 1.0)).backward()
        opt.step()
    np.testing.assert_allclose(p.data, 1.0, atol=1e-2)


def test_state_dict_round_trip(rng):
    a, b = SageConv(2, 3, rng), SageConv(2, 3, rng)
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    with pytest.raises(ValueError):
        Dense(2, 3, rng).load_state_dict(a.state_dict())
