import numpy as np
import pytest
from scipy.signal import correlate2d

from cardioshape.tensor_nn import (
    AdamState,
    BatchNorm,
    Conv3x3,
    Dense,
    ForwardNotRunError,
    FullConv,
    MaxPool2,
    ReLU,
    Sequential,
    ShapeMismatchError,
    Sigmoid,
    adam_step,
    central_difference,
    load_checkpoint,
    relative_error,
    save_checkpoint,
)


def scalar_grad_check(layer, x, rng, train=True):
    """Analytic vs central-difference gradients of sum(out * r)."""
    out = layer.forward(x, train)
    r = rng.normal(size=out.shape)
    dx = layer.backward(r)

    def f():
        return float(np.sum(layer.forward(x, train) * r))

    num_x = central_difference(f, x, range(min(x.size, 40)))
    errs = [relative_error(dx.ravel()[: num_x.size], num_x)]
    for key, p in layer.params.items():
        layer.forward(x, train)
        layer.backward(r)
        g = layer.grads[key].copy()
        num = central_difference(f, p, range(min(p.size, 40)))
        errs.append(relative_error(g.ravel()[: num.size], num))
    return max(errs)


def test_conv_matches_scipy_correlate(rng):
    layer = Conv3x3(2, 3, rng, np.float64)
    layer.params["b"][:] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 7, 5))
    out = layer.forward(x)
    w = layer.params["w"]
    for n in range(2):
        for o in range(3):
            ref = sum(correlate2d(x[n, c], w[o, c], mode="same") for c in range(2))
            np.testing.assert_allclose(out[n, o], ref + layer.params["b"][o], atol=1e-12)


def test_pool_ties_pick_first():
    pool = MaxPool2()
    x = np.ones((1, 1, 2, 2))
    assert pool.forward(x).item() == 1.0
    assert pool.argmax.item() == 0
    g = pool.backward(np.array([[[[5.0]]]]))
    np.testing.assert_array_equal(g[0, 0], [[5, 0], [0, 0]])


def test_pool_rejects_odd():
    with pytest.raises(ShapeMismatchError):
        MaxPool2().forward(np.zeros((1, 1, 3, 4)))


def test_sigmoid_is_stable():
    y = Sigmoid().forward(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])


def test_fullconv_is_flattened_dense(rng):
    layer = FullConv(2, 3, 4, 5, rng, np.float64)
    x = rng.normal(size=(3, 2, 3, 4))
    ref = x.reshape(3, -1) @ layer.params["w"].reshape(5, -1).T
    np.testing.assert_allclose(layer.forward(x), ref, atol=1e-12)


@pytest.mark.parametrize(
    "make, shape",
    [
        (lambda r: Conv3x3(2, 3, r, np.float64), (2, 2, 6, 6)),
        (lambda r: Dense(5, 4, r, np.float64), (3, 5)),
        (lambda r: FullConv(2, 4, 4, 3, r, np.float64), (2, 2, 4, 4)),
        (lambda r: Sigmoid(), (3, 4)),
    ],
)
def test_smooth_layer_gradients(make, shape, rng):
    layer = make(rng)
    assert scalar_grad_check(layer, rng.normal(size=shape), rng) < 1e-6


def test_batchnorm_gradients(rng):
    bn = BatchNorm(4, np.float64)
    bn.params["gamma"][:] = 1 + 0.3 * rng.normal(size=4)
    bn.params["beta"][:] = rng.normal(size=4)
    assert scalar_grad_check(bn, rng.normal(size=(6, 4)), rng) < 1e-6


def test_relu_gradient_away_from_kink(rng):
    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 0.05] = 0.5
    assert scalar_grad_check(ReLU(), x, rng) < 1e-8


def test_batchnorm_running_statistics(rng):
    bn = BatchNorm(3, np.float64)
    x = rng.normal(size=(8, 3)) * 2 + 5
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(0))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(0, ddof=1))
    # evaluation mode uses the stored statistics and leaves them untouched
    before = bn.buffers["running_mean"].copy()
    bn.forward(x[:1], train=False)
    np.testing.assert_array_equal(bn.buffers["running_mean"], before)


def test_batchnorm_train_needs_two_rows():
    with pytest.raises(ShapeMismatchError):
        BatchNorm(2).forward(np.zeros((1, 2)), train=True)


def test_backward_before_forward():
    with pytest.raises(ForwardNotRunError):
        ReLU().backward(np.zeros(3))


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 0.0])}
    state = AdamState(learning_rate=0.1)
    adam_step(state, p, g)
    # bias correction makes the first step lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_minimises_quadratic():
    p = {"x": np.array([5.0, -3.0])}
    state = AdamState(learning_rate=0.05)
    for _ in range(2000):
        adam_step(state, p, {"x": 2 * p["x"]})
    np.testing.assert_allclose(p["x"], 0, atol=1e-3)


def test_sequential_names(rng):
    net = Sequential([Dense(3, 4, rng), ReLU(), Sequential([Dense(4, 2, rng)])])
    names = [n for n, _, _ in net.named_params("m.")]
    assert names == ["m.0.w", "m.0.b", "m.2.0.w", "m.2.0.b"]


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.w": rng.normal(size=(2, 3)).astype(np.float32), "b": np.zeros(4, np.float32)}
    save_checkpoint(tmp_path / "c.nnet", tensors, {"k": 4, "note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.nnet")
    assert meta == {"k": 4, "note": "x"}
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
