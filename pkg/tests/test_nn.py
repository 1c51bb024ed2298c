import numpy as np
import pytest

from deepclean.nn import (
    AdamState,
    Conv1D,
    Dense,
    LayerSpec,
    MaxPool1D,
    ShapeError,
    Upsample1DCrop,
    adam_step,
    build_sequential,
    conv1d_backward,
    conv1d_forward,
    dense_forward,
    dropout,
    grad_check,
    maxpool1d,
    upsample1d_crop,
)


def direct_conv(x, w, b):
    length, cin = x.shape
    k, _, cout = w.shape
    left = (k - 1) // 2
    out = np.zeros((length, cout))
    for t in range(length):
        for o in range(cout):
            acc = b[o]
            for j in range(k):
                src = t + j - left
                if 0 <= src < length:
                    for c in range(cin):
                        acc += x[src, c] * w[j, c, o]
            out[t, o] = acc
    return out


def test_conv_identity_kernels():
    x = np.random.default_rng(0).normal(size=(9, 1))
    assert np.array_equal(conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1)), x)
    w = np.zeros((3, 1, 1))
    w[1] = 1.0
    assert np.array_equal(conv1d_forward(x, w, np.zeros(1)), x)


@pytest.mark.parametrize("k,cin,cout", [(3, 2, 4), (5, 16, 32), (4, 3, 2), (3, 32, 32)])
def test_conv_matches_loop_oracle(k, cin, cout):
    rng = np.random.default_rng(k * 100 + cin)
    x = rng.normal(size=(12, cin))
    w = rng.normal(size=(k, cin, cout))
    b = rng.normal(size=cout)
    assert np.allclose(conv1d_forward(x, w, b), direct_conv(x, w, b), atol=1e-12)
    batch = rng.normal(size=(3, 12, cin))
    got = conv1d_forward(batch, w, b)
    for i in range(3):
        assert np.allclose(got[i], direct_conv(batch[i], w, b), atol=1e-12)


def test_conv_shape_error():
    with pytest.raises(ShapeError):
        conv1d_forward(np.zeros((5, 2)), np.zeros((3, 3, 1)), np.zeros(1))


def test_conv_translation_equivariance_interior():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 2))
    w = rng.normal(size=(5, 2, 3))
    b = np.zeros(3)
    y = conv1d_forward(x, w, b)
    ys = conv1d_forward(np.roll(x, 4, axis=0), w, b)
    assert np.allclose(ys[8:36], y[4:32])


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    for k, cin, cout in [(3, 2, 4), (5, 16, 3), (3, 8, 16)]:
        x = rng.normal(size=(2, 11, cin))
        w = rng.normal(size=(k, cin, cout))
        b = rng.normal(size=cout)
        g = rng.normal(size=(2, 11, cout))
        gx, gw, gb = conv1d_backward(x, w, g)
        params = {"x": x, "w": w, "b": b}
        rep = grad_check(lambda: float(np.sum(conv1d_forward(x, w, b) * g)), params,
                         {"x": gx, "w": gw, "b": gb}, tolerance=1e-6)
        assert rep.passed, rep.failures[:3]


def test_maxpool_examples():
    assert np.array_equal(maxpool1d(np.array([1.0, 3, 2, 2]), 2), [3, 2])
    x = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(maxpool1d(x, 1), x)
    assert maxpool1d(np.arange(7.0), 5).tolist() == [4.0, 6.0]


def test_maxpool_gradient_routes_to_first_tie():
    layer = MaxPool1D(2)
    layer.forward(np.array([[[2.0], [2.0], [1.0], [5.0]]]))
    g = layer.backward(np.array([[[1.0], [1.0]]]))
    assert g[0, :, 0].tolist() == [1.0, 0.0, 0.0, 1.0]


def test_maxpool_grad_check_random():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 23, 3))
    layer = MaxPool1D(5)
    g = rng.normal(size=(2, 5, 3))
    layer.forward(x)
    gx = layer.backward(g)
    rep = grad_check(lambda: float(np.sum(layer.forward(x) * g)), {"x": x}, {"x": gx},
                     pattern=layer.pattern, tolerance=1e-4)
    assert rep.passed and rep.checked == x.size


def test_grad_check_skips_pool_ties():
    x = np.array([[[1.0], [1.0], [0.0], [3.0]]])
    layer = MaxPool1D(2)
    g = np.ones((1, 2, 1))
    layer.forward(x)
    gx = layer.backward(g)
    rep = grad_check(lambda: float(np.sum(layer.forward(x) * g)), {"x": x}, {"x": gx},
                     pattern=layer.pattern)
    assert rep.skipped == 2
    assert rep.passed


def test_upsample_examples():
    assert upsample1d_crop(np.array([1.0, 2.0]), 5, 8).tolist() == [1, 1, 1, 1, 1, 2, 2, 2]
    x = np.arange(4.0)
    assert np.array_equal(upsample1d_crop(x, 1, 4), x)
    with pytest.raises(ShapeError):
        upsample1d_crop(x, 2, 9)
    const = np.full(23, 1.5)
    assert np.array_equal(upsample1d_crop(maxpool1d(const, 5), 5, 23), const)


def test_upsample_grad_check():
    rng = np.random.default_rng(2)
    layer = Upsample1DCrop(5, 23)
    x = rng.normal(size=(2, 5, 3))
    g = rng.normal(size=(2, 23, 3))
    layer.forward(x)
    gx = layer.backward(g)
    rep = grad_check(lambda: float(np.sum(layer.forward(x) * g)), {"x": x}, {"x": gx}, tolerance=1e-8)
    assert rep.passed


def test_dense_examples():
    x = np.random.default_rng(0).normal(size=6)
    assert np.allclose(dense_forward(x, np.eye(6), np.zeros(6)), x)
    b = np.arange(3.0)
    assert np.array_equal(dense_forward(x, np.zeros((6, 3)), b), b)
    rng = np.random.default_rng(1)
    w = rng.normal(size=(6, 3))
    want = [sum(x[i] * w[i, j] for i in range(6)) + b[j] for j in range(3)]
    assert np.allclose(dense_forward(x, w, b), want, atol=1e-12)
    with pytest.raises(ShapeError):
        dense_forward(x, np.zeros((5, 3)), b)


def test_linear_dense_grad_check_tight():
    rng = np.random.default_rng(4)
    layer = Dense(7, 4)
    layer.init(rng)
    x = rng.normal(size=(3, 7))
    g = rng.normal(size=(3, 4))
    layer.forward(x)
    layer.backward(g)
    rep = grad_check(lambda: float(np.sum(layer.forward(x) * g)), layer.params, dict(layer.grads), tolerance=1e-8)
    assert rep.passed
    assert rep.max_rel_error < 1e-8


def test_relu_conv_layer_grad_check():
    rng = np.random.default_rng(9)
    layer = Conv1D(2, 3, 5, activation="relu")
    layer.init(rng)
    x = rng.normal(size=(2, 15, 2))
    g = rng.normal(size=(2, 15, 3))
    layer.forward(x)
    layer.backward(g)
    rep = grad_check(lambda: float(np.sum(layer.forward(x) * g)), layer.params, dict(layer.grads),
                     pattern=layer.pattern)
    assert rep.passed


def test_dropout_modes():
    x = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(dropout(x, 0.0, True, seed=1), x)
    assert np.array_equal(dropout(x, 0.0, False), x)
    assert np.array_equal(dropout(x, 0.5, False), x)
    with pytest.raises(ValueError):
        dropout(x, 1.0, True)


def test_dropout_expectation_monte_carlo():
    x = np.linspace(0.5, 2.0, 8)
    draws = dropout(np.broadcast_to(x, (100_000, 8)), 0.1, True, seed=7)
    assert np.allclose(draws.mean(axis=0), x, rtol=0.01)
    kept = draws != 0
    assert np.allclose(draws[kept], np.broadcast_to(x / 0.9, draws.shape)[kept])


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_is_minus_lr():
    p = {"w": np.zeros(3)}
    new, _ = adam_step(p, {"w": np.ones(3)}, AdamState(lr=1e-3))
    assert np.allclose(new["w"], -1e-3, rtol=1e-6)


def test_adam_scalar_trace_against_recurrence():
    grads = [0.5, -1.0, 2.0, 0.1, -0.3]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    expected = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(theta)
    state = AdamState(lr=lr)
    p = {"t": np.array([1.0])}
    got = []
    for g in grads:
        p, state = adam_step(p, {"t": np.array([g])}, state)
        got.append(float(p["t"][0]))
    assert np.allclose(got, expected, rtol=0, atol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_layerspec_validation():
    with pytest.raises(ValueError):
        LayerSpec("dropout", rate=1.0)
    with pytest.raises(ValueError):
        LayerSpec("conv1d", filters=0, kernel_size=3)
    with pytest.raises(ValueError):
        LayerSpec("bogus")


def test_sequential_forward_deterministic_and_shapes():
    specs = [LayerSpec("conv1d", filters=4, kernel_size=3, activation="relu"),
             LayerSpec("maxpool1d", pool_size=5),
             LayerSpec("dropout", rate=0.2),
             LayerSpec("reshape", target_shape=(20,)),
             LayerSpec("dense", units=3)]
    net, out_shape = build_sequential(specs, (25, 1))
    assert out_shape == (3,)
    net.init(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 25, 1))
    a = net.forward(x)
    b = net.forward(x)
    assert a.shape == (2, 3)
    assert np.array_equal(a, b)
    t1 = net.forward(x, training=True, rng=np.random.default_rng(5))
    t2 = net.forward(x, training=True, rng=np.random.default_rng(5))
    assert np.array_equal(t1, t2)
