import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from lowbit_emotion import nn
from lowbit_emotion.nn import (
    SGD,
    Conv2D,
    Dropout,
    Flatten,
    FullyConnected,
    LayerParams,
    MaxPool2x2,
    Network,
    NonFiniteError,
    QuadrantPool,
    ReLU,
    SGDConfig,
    ShapeError,
    conv2d,
    grad_check,
    init_params,
    maxpool2x2,
    quadrant_pool,
)


def conv_reference(x, w, b):
    """Same-size cross-correlation via scipy, one output channel at a time."""
    bsz, _, h, wd = x.shape
    out = np.zeros((bsz, w.shape[0], h, wd))
    for n in range(bsz):
        for o in range(w.shape[0]):
            acc = correlate(x[n], w[o], mode="same", method="direct")
            out[n, o] = acc[acc.shape[0] // 2] + b[o]
    return out


@pytest.mark.parametrize("out_c", [1, 3, 6])
def test_conv_matches_scipy(out_c):
    # out_c <= 4 exercises the row-shift path, larger the patch-matrix path
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 9))
    p = LayerParams("conv", rng.normal(size=(out_c, 3, 5, 5)), rng.normal(size=out_c))
    np.testing.assert_allclose(conv2d(x, p), conv_reference(x, p.weights, p.biases), atol=1e-12)


def test_conv_identity_kernel():
    w = np.zeros((1, 1, 5, 5))
    w[0, 0, 2, 2] = 1.0
    x = np.arange(36.0).reshape(1, 1, 6, 6)
    np.testing.assert_array_equal(conv2d(x, LayerParams("conv", w, np.zeros(1))), x)


def test_conv_linearity():
    rng = np.random.default_rng(1)
    p = LayerParams("conv", rng.normal(size=(5, 2, 3, 3)), np.zeros(5))
    a, b = rng.normal(size=(2, 1, 2, 6, 6))
    np.testing.assert_allclose(conv2d(2 * a - 3 * b, p), 2 * conv2d(a, p) - 3 * conv2d(b, p), atol=1e-11)


def test_maxpool_examples():
    x = np.array([[1, 2, 5, 0], [3, 4, 1, 1], [0, 0, 9, 8], [0, -1, 7, 6]], float)[None, None]
    np.testing.assert_array_equal(maxpool2x2(x)[0, 0], [[4, 5], [0, 9]])
    with pytest.raises(ShapeError):
        maxpool2x2(np.zeros((1, 1, 3, 4)))


def test_quadrant_pool_example():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(quadrant_pool(x)[0, 0], [[5, 7], [13, 15]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pooling_invariant_to_permutation_within_windows(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 6, 6))
    y = x.copy()
    # shuffle the contents of every quadrant independently
    for c in range(2):
        for r0 in (0, 3):
            for c0 in (0, 3):
                block = y[0, c, r0:r0 + 3, c0:c0 + 3]
                y[0, c, r0:r0 + 3, c0:c0 + 3] = rng.permutation(block.ravel()).reshape(3, 3)
    np.testing.assert_array_equal(quadrant_pool(x), quadrant_pool(y))


def test_maxpool_gradient_routes_to_argmax():
    layer = MaxPool2x2()
    x = np.array([[1.0, 3.0], [2.0, 0.0]])[None, None]
    layer.forward(x)
    np.testing.assert_array_equal(layer.backward(np.ones((1, 1, 1, 1)))[0, 0], [[0, 1], [0, 0]])


def test_dropout_eval_identity_and_train_expectation():
    x = np.ones((2000, 50))
    layer = Dropout(0.5)
    assert layer.forward(x, train=False) is x
    out = layer.forward(x, train=True, rng=np.random.default_rng(0))
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.01
    with pytest.raises(ValueError):
        layer.forward(x, train=True)


def test_mse_loss_example():
    loss, g = nn.mse_loss(np.array([1.0, 2.0]), np.array([0.0, 4.0]))
    assert loss == 2.5
    np.testing.assert_array_equal(g, [1.0, -2.0])
    with pytest.raises(NonFiniteError):
        nn.mse_loss(np.array([np.inf]), np.array([0.0]))


def test_nonfinite_input_raises():
    net = Network([FullyConnected(LayerParams("fc", np.ones((1, 2)), np.zeros(1)))])
    with pytest.raises(NonFiniteError):
        net.forward(np.array([[np.nan, 1.0]]))


def test_sgd_step_hand_computed():
    p = LayerParams("fc", np.array([[1.0]]), np.array([0.5]), learn_rate_scale=0.1)
    opt = SGD([p], SGDConfig(base_lr=0.1, momentum=0.9, weight_decay=0.01))
    g = (np.array([[2.0]]), np.array([1.0]))
    opt.step([g], 0.1)
    # lr = 0.1 * 0.1; v = -0.01 * (2 + 0.01 * 1)
    assert p.weights[0, 0] == pytest.approx(1.0 - 0.01 * 2.01)
    assert p.biases[0] == pytest.approx(0.5 - 0.01)
    opt.step([g], 0.1)
    v1 = -0.01 * 2.01
    w1 = 1.0 + v1
    v2 = 0.9 * v1 - 0.01 * (2.0 + 0.01 * w1)
    assert p.weights[0, 0] == pytest.approx(w1 + v2)
    assert opt.steps == 2


def test_sgd_total_step_counter():
    before = SGD.total_steps
    p = LayerParams("fc", np.zeros((1, 1)), np.zeros(1))
    SGD([p], SGDConfig()).step([(np.zeros((1, 1)), np.zeros(1))], 0.01)
    assert SGD.total_steps == before + 1


def test_config_validation():
    with pytest.raises(ValueError):
        SGDConfig(base_lr=0)
    with pytest.raises(ValueError):
        SGDConfig(momentum=1.0)
    with pytest.raises(ShapeError):
        LayerParams("conv", np.zeros((2, 1, 3, 5)), np.zeros(2))
    with pytest.raises(ShapeError):
        LayerParams("fc", np.zeros((2, 3)), np.zeros(3))


def test_init_params_statistics():
    rng = np.random.default_rng(0)
    p = init_params("conv", (64, 32, 5, 5), rng, std=0.01)
    assert abs(p.weights.std() - 0.01) < 5e-4
    assert not p.biases.any()
    he = init_params("fc", (300, 1024), rng, std=None)
    assert abs(he.weights.std() - np.sqrt(2 / 1024)) < 2e-3


def _small_net(rng):
    def conv(o, i, name):
        return Conv2D(init_params("conv", (o, i, 3, 3), rng, 0.5), name)

    return Network([
        conv(3, 1, "c1"), ReLU(), MaxPool2x2(),
        conv(2, 3, "c2"), ReLU(), QuadrantPool(), Flatten(),
        FullyConnected(init_params("fc", (4, 8), rng, 0.5), "fc"), ReLU(), Dropout(0.5),
        FullyConnected(init_params("fc", (1, 4), rng, 0.5), "out"),
    ])


def test_grad_check_small_network():
    rng = np.random.default_rng(3)
    net = _small_net(rng)
    x = rng.normal(size=(2, 1, 8, 8))
    assert grad_check(net, x, rng.normal(size=(2, 1))) < 1e-6


def test_input_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    layer = Conv2D(init_params("conv", (2, 3, 5, 5), rng, 0.3))
    x = rng.normal(size=(1, 3, 6, 6))
    dy = rng.normal(size=(1, 2, 6, 6))
    layer.forward(x)
    dx = layer.backward(dy)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 3, 2), (0, 2, 5, 5)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num = (np.sum(layer.forward(xp) * dy) - np.sum(layer.forward(xm) * dy)) / (2 * eps)
        assert dx[idx] == pytest.approx(num, rel=1e-6)


def test_grad_check_rejects_float32():
    net = _small_net(np.random.default_rng(0)).astype(np.float32)
    with pytest.raises(TypeError):
        grad_check(net, np.zeros((1, 1, 8, 8), np.float32), np.zeros((1, 1), np.float32))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    net = _small_net(rng)
    net.param_layers[0].params.learn_rate_scale = 0.1
    nn.save_checkpoint(tmp_path / "a.ckpt", net, {"variant": "demo"})
    meta, layers = nn.read_checkpoint(tmp_path / "a.ckpt")
    assert meta["variant"] == "demo"
    other = _small_net(np.random.default_rng(6))
    nn.load_into(other, layers)
    x = rng.normal(size=(2, 1, 8, 8))
    np.testing.assert_array_equal(net.forward(x), other.forward(x))
    assert other.param_layers[0].params.learn_rate_scale == 0.1
    nn.save_checkpoint(tmp_path / "b.ckpt", other, {"variant": "demo"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nn.read_checkpoint(tmp_path / "x")


def test_load_into_mismatch():
    rng = np.random.default_rng(0)
    a = Network([FullyConnected(init_params("fc", (2, 3), rng), "fc")])
    b = Network([FullyConnected(init_params("fc", (2, 4), rng), "fc")])
    with pytest.raises(ShapeError):
        nn.load_into(b, [(l.name, l.params) for l in a.param_layers])
