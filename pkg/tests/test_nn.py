import math

import numpy as np
import pytest

from spineseg.nn import (
    Architecture, Network, OptimizerConfig, OptimizerState, ShapeError, gradient_check,
    optimizer_step, softmax, softmax_xent,
)
from spineseg.nn import layers as L


def naive_conv(x, w, b):
    """Quintuple loop, zero padding, stride 1 (batch axis looped outside)."""
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    out = np.zeros((n, h, wd, cout))
    for bi in range(n):
        for r in range(h):
            for c in range(wd):
                for co in range(cout):
                    acc = b[co]
                    for i in range(k):
                        for j in range(k):
                            rr, cc = r + i - p, c + j - p
                            if 0 <= rr < h and 0 <= cc < wd:
                                acc += x[bi, rr, cc, :] @ w[i, j, :, co]
                    out[bi, r, c, co] = acc
    return out


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def test_conv_zero_input_gives_bias():
    x = np.zeros((1, 6, 6, 2))
    w = np.random.default_rng(0).standard_normal((5, 5, 2, 3))
    y, _ = L.conv2d_forward(x, w, np.array([1.0, -2.0, 0.5]))
    assert np.all(y[..., 0] == 1.0) and np.all(y[..., 1] == -2.0) and np.all(y[..., 2] == 0.5)


def test_conv_identity_kernel():
    x = np.random.default_rng(1).standard_normal((2, 7, 7, 1))
    w = np.zeros((5, 5, 1, 1))
    w[2, 2, 0, 0] = 1.0
    y, _ = L.conv2d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(y, x)


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 7, 7, 2))
    w = rng.standard_normal((5, 5, 2, 3))
    b = rng.standard_normal(3)
    y, _ = L.conv2d_forward(x, w, b)
    ref = naive_conv(x, w, b)
    np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-12)
    y32, _ = L.conv2d_forward(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
    np.testing.assert_allclose(y32, ref, rtol=1e-5, atol=1e-5)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 6, 2))
    w = rng.standard_normal((5, 5, 2, 3))
    b = rng.standard_normal(3)
    up = rng.standard_normal((2, 6, 6, 3))

    def f():
        return float((L.conv2d_forward(x, w, b)[0] * up).sum())

    _, cache = L.conv2d_forward(x, w, b)
    dx, dw, db = L.conv2d_backward(up, cache)
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(dw, numeric_grad(f, w), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(db, numeric_grad(f, b), rtol=1e-6, atol=1e-7)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((5, 5, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        L.conv2d_forward(np.zeros((1, 4, 4, 1)), np.zeros((4, 4, 1, 1)), np.zeros(1))


def test_maxpool_block():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, _ = L.maxpool2_forward(x)
    assert y.item() == 4.0


def test_maxpool_ties_route_top_left():
    x = np.full((1, 4, 4, 2), 3.0)
    y, cache = L.maxpool2_forward(x)
    assert np.all(y == 3.0)
    dx = L.maxpool2_backward(np.ones_like(y), cache)
    expected = np.zeros_like(x)
    expected[:, 0::2, 0::2] = 1.0
    np.testing.assert_array_equal(dx, expected)


def test_maxpool_random_against_blockwise_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 8, 8, 3))
    y, cache = L.maxpool2_forward(x)
    for r in range(4):
        for c in range(4):
            for ch in range(3):
                assert y[0, r, c, ch] == x[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2, ch].max()
    up = rng.standard_normal(y.shape)

    def f():
        return float((L.maxpool2_forward(x)[0] * up).sum())

    np.testing.assert_allclose(L.maxpool2_backward(up, cache), numeric_grad(f, x), atol=1e-8)


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError):
        L.maxpool2_forward(np.zeros((1, 5, 4, 1)))


def test_dense_identity_and_bias():
    x = np.array([[1.0, -2.0, 3.0]])
    y, _ = L.dense_forward(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)
    b = np.array([0.5, 1.5])
    y, _ = L.dense_forward(np.zeros((1, 3)), np.ones((3, 2)), b)
    np.testing.assert_array_equal(y[0], b)


def test_dense_oracle_and_gradients():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 10))
    w = rng.standard_normal((10, 7))
    b = rng.standard_normal(7)
    y, cache = L.dense_forward(x, w, b)
    ref = [sum(x[0, i] * w[i, j] for i in range(10)) + b[j] for j in range(7)]
    np.testing.assert_allclose(y[0], ref, rtol=1e-12)
    up = rng.standard_normal((1, 7))

    def f():
        return float((L.dense_forward(x, w, b)[0] * up).sum())

    dx, dw, db = L.dense_backward(up, cache)
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-7)
    np.testing.assert_allclose(dw, numeric_grad(f, w), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(db, numeric_grad(f, b), rtol=1e-7)
    with pytest.raises(ShapeError):
        L.dense_forward(np.zeros((1, 4)), w, b)


def test_relu():
    y, mask = L.relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert y.tolist() == [0.0, 0.0, 2.0]
    assert L.relu_backward(np.ones(3), mask).tolist() == [0.0, 0.0, 1.0]
    assert np.all(L.relu_forward(-np.arange(1.0, 5.0))[0] == 0)
    x = np.array([-1.3, 0.4, 2.2, -0.01])
    num = numeric_grad(lambda: float(L.relu_forward(x)[0].sum()), x)
    np.testing.assert_allclose(L.relu_backward(np.ones(4), L.relu_forward(x)[1]), num, atol=1e-9)


def test_dropout_modes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 10))
    for train in (True, False):
        y, mask = L.dropout_forward(x, 0.0, train, rng)
        np.testing.assert_array_equal(y, x)
    y, mask = L.dropout_forward(x, 0.5, False, rng)
    np.testing.assert_array_equal(y, x)
    with pytest.raises(ValueError):
        L.dropout_forward(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        L.dropout_forward(x, -0.1, True, rng)


def test_dropout_statistics():
    rng = np.random.default_rng(123)
    x = np.ones((1, 100_000))
    y, mask = L.dropout_forward(x, 0.5, True, rng)
    survivors = np.count_nonzero(y) / y.size
    assert abs(survivors - 0.5) <= 0.01
    assert abs(y.mean() - 1.0) <= 0.02
    assert set(np.unique(y)) <= {0.0, 2.0}
    np.testing.assert_array_equal(L.dropout_backward(np.ones_like(y), mask), y)


def test_softmax_xent_basics():
    loss, probs, _ = softmax_xent(np.zeros(4), 2)
    np.testing.assert_allclose(probs, 0.25)
    assert loss == pytest.approx(math.log(4), abs=1e-6)
    loss, _, _ = softmax_xent(np.array([50.0, 0, 0, 0]), 0)
    assert loss < 1e-8
    with pytest.raises(ValueError):
        softmax_xent(np.zeros(4), 4)


def test_softmax_xent_gradient():
    rng = np.random.default_rng(6)
    z = rng.standard_normal(5) * 3
    _, probs, grad = softmax_xent(z, 3)
    num = numeric_grad(lambda: softmax_xent(z, 3)[0], z)
    np.testing.assert_allclose(grad[0], num, atol=1e-6)
    assert probs.sum() == pytest.approx(1, abs=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((20, 4)) * 10
    np.testing.assert_allclose(softmax(z), softmax(z + 123.4), atol=1e-6)
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1, atol=1e-6)


def test_shape_chain_full_architecture():
    chain = dict(Architecture().shape_chain())
    assert chain["conv1"] == (32, 32, 32)
    assert chain["pool1"] == (16, 16, 32)
    assert chain["conv2"] == (16, 16, 64)
    assert chain["pool2"] == (8, 8, 64)
    assert chain["flatten"] == (4096,)
    assert chain["fc1"] == (1024,) and chain["fc2"] == (2048,)
    assert chain["softmax"] == (4,)
    shapes = dict(Architecture().param_shapes())
    assert shapes["conv1.w"] == (5, 5, 1, 32) and shapes["conv2.w"] == (5, 5, 32, 64)
    assert shapes["fc1.w"] == (4096, 1024) and shapes["fc2.w"] == (1024, 2048)
    assert shapes["out.w"] == (2048, 4)


def test_forward_output_and_determinism():
    net = Network.init(Architecture(), 0)
    x = np.random.default_rng(1).standard_normal((3, 32, 32, 1))
    p = net.forward(x)
    assert p.shape == (3, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    assert np.array_equal(p, Network.init(Architecture(), 0).forward(x))
    single = net.forward(x[0, :, :, 0])
    assert single.shape == (1, 4)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 16, 16, 1)))


def test_zero_network_is_uniform():
    net = Network(Architecture())
    p = net.forward(np.random.default_rng(0).standard_normal((2, 32, 32, 1)))
    np.testing.assert_allclose(p, 0.25, atol=1e-7)


def test_train_mode_dropout_is_seeded():
    net = Network.init(Architecture.reduced(), 0)
    x = np.random.default_rng(1).standard_normal((4, 8, 8, 1))
    a = net.forward(x, train=True, rng=np.random.default_rng(5))
    b = net.forward(x, train=True, rng=np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, net.forward(x))


def test_backward_shapes_and_zero_signal():
    arch = Architecture.reduced()
    net = Network.init(arch, 0, dtype=np.float64)
    x = np.random.default_rng(2).standard_normal((2, 8, 8, 1))
    _, grads, _ = net.loss_and_grads(x, [0, 3], rng=np.random.default_rng(0))
    assert list(grads) == list(net.params)
    for k in grads:
        assert grads[k].shape == net.params[k].shape
    # logits saturated at the label: p - onehot ~ 0
    net.params["out.b"][:] = [60.0, 0, 0, 0]
    _, grads, _ = net.loss_and_grads(x, [0, 0], train=False)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-15


def test_gradient_check_reduced_network():
    rng = np.random.default_rng(8)
    net = Network.init(Architecture.reduced(), rng, dtype=np.float64)
    x = rng.standard_normal((1, 8, 8, 1))
    assert gradient_check(net, x, 2) < 1e-6


def test_gradient_check_dense_softmax():
    arch = Architecture(input_size=4, conv_channels=(), dense=(), classes=3)
    rng = np.random.default_rng(9)
    net = Network.init(arch, rng, dtype=np.float64)
    assert gradient_check(net, rng.standard_normal((1, 4, 4, 1)), 1) < 1e-8


def test_gradient_check_near_relu_kink():
    # one hidden unit sits 1e-4 from its kink; the largest step crosses it
    arch = Architecture(input_size=4, conv_channels=(), dense=(8,), classes=3)
    rng = np.random.default_rng(10)
    net = Network.init(arch, rng, dtype=np.float64)
    x = rng.standard_normal((1, 4, 4, 1))
    pre = x.reshape(1, -1) @ net.params["fc1.w"]
    net.params["fc1.b"][:] = 0.5 - pre[0]
    net.params["fc1.b"][3] = 1e-4 - pre[0, 3]
    assert gradient_check(net, x, 0) < 1e-6


def test_gradient_check_catches_wrong_backward(monkeypatch):
    rng = np.random.default_rng(12)
    net = Network.init(Architecture.reduced(), rng, dtype=np.float64)
    x = rng.standard_normal((1, 8, 8, 1))
    real = L.relu_backward
    monkeypatch.setattr(L, "relu_backward", lambda dy, mask: real(dy, mask) * 1.001)
    assert gradient_check(net, x, 1) > 1e-4


def test_gradient_check_rejects_zero_eps():
    net = Network.init(Architecture.reduced(), 0)
    with pytest.raises(ValueError):
        gradient_check(net, np.zeros((1, 8, 8, 1)), 0, eps=0)


def test_sgd_step_and_zero_lr():
    rng = np.random.default_rng(10)
    params = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
    grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    before = {k: v.copy() for k, v in params.items()}
    optimizer_step(params, grads, OptimizerConfig("sgd-momentum", lr=0.1), OptimizerState())
    for k in params:
        np.testing.assert_allclose(params[k], before[k] - 0.1 * grads[k], rtol=1e-15)
    for kind in ("adam", "sgd-momentum"):
        p = {k: v.copy() for k, v in before.items()}
        st = OptimizerState()
        for _ in range(3):
            optimizer_step(p, grads, OptimizerConfig(kind, lr=0.0), st)
        for k in p:
            assert np.array_equal(p[k], before[k])


def test_sgd_momentum_accumulates():
    p = {"w": np.zeros(1)}
    g = {"w": np.ones(1)}
    st = OptimizerState()
    cfg = OptimizerConfig("sgd-momentum", lr=0.1, momentum=0.9)
    optimizer_step(p, g, cfg, st)
    optimizer_step(p, g, cfg, st)
    assert p["w"][0] == pytest.approx(-0.1 - 0.19)


def test_adam_first_step_is_sign():
    p = {"w": np.zeros(4)}
    g = {"w": np.array([1e3, -5e2, 20.0, -7.0])}
    optimizer_step(p, g, OptimizerConfig("adam", lr=1e-3), OptimizerState())
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-6)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr=-1)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="rmsprop")
    with pytest.raises(ValueError):
        optimizer_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, OptimizerConfig(), OptimizerState())
