import math

import numpy as np
import pytest

from daq.autodiff import ShapeError, Tensor, backward
from daq.autodiff import ops
from daq.autodiff.gradcheck import numeric_grad, probe_clear_of_kinks, probe_network, rel_error
from daq.autodiff.layers import LayerKind, LayerSpec, Network, quantized_conv
from daq.autodiff.quant import FakeQuantizer
from daq.baselines import QuantizerKind
from daq.core import Role
from daq.harness.training import init_quantizers

ALL_KINDS = [
    QuantizerKind.daq(),
    QuantizerKind.kernel(4),
    QuantizerKind.kernel(24),
    QuantizerKind.plain(10),
    QuantizerKind.sigmoid(4),
    QuantizerKind.ste(),
    QuantizerKind.ste_dasr(),
    QuantizerKind.annealed(),
]


def rand(*shape, seed=0, requires_grad=True):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=requires_grad)


def check_grads(loss_fn, tensors, rtol=1e-6):
    loss = loss_fn()
    grads = backward(loss, tensors)
    for t in tensors:
        num = numeric_grad(lambda: loss_fn().item(), t)
        np.testing.assert_allclose(grads[t], num, rtol=rtol, atol=1e-8)


# -- tensor ------------------------------------------------------------------------


def test_tensor_copies_input():
    arr = np.ones(3)
    t = Tensor(arr)
    arr[0] = 5
    assert t.data[0] == 1
    assert Tensor(t.data).data is not t.data


def test_tensor_dtypes():
    assert Tensor([1, 2], dtype="f32").dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64
    assert Tensor(np.zeros(2, np.float32)).dtype == np.float32


def test_sum_gradient_is_ones():
    x = rand(3, 4)
    grads = backward(ops.sum(x))
    np.testing.assert_array_equal(grads[x], np.ones((3, 4)))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError, match="scalar"):
        backward(rand(2))


def test_diamond_accumulates():
    x = rand(4)
    a = x * 2.0
    b = x * 3.0
    loss = ops.sum(a + b * a)  # d/dx = 2 + 3*2x*2 = 2 + 12x
    grads = backward(loss)
    np.testing.assert_allclose(grads[x], 2 + 12 * x.data, rtol=1e-14)


def test_reused_input_accumulates():
    x = rand(3)
    grads = backward(ops.sum(x * x))
    np.testing.assert_allclose(grads[x], 2 * x.data)


def test_unreachable_param_gets_zero():
    x, y = rand(3), rand(2, seed=1)
    grads = backward(ops.sum(x), [x, y])
    np.testing.assert_array_equal(grads[y], np.zeros(2))
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_deep_chain_does_not_recurse():
    x = rand(2)
    y = x
    for _ in range(5000):
        y = y * 1.0
    assert backward(ops.sum(y))[x].tolist() == [1.0, 1.0]


# -- ops ---------------------------------------------------------------------------


def test_dense_identity():
    x = rand(3, 4, requires_grad=False)
    out = ops.dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_one_by_one():
    out = ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_matches_direct_sum():
    x = rand(2, 3, 5, 6, seed=1).data
    w = rand(4, 3, 3, 3, seed=2).data
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_cross_entropy_uniform(k):
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, k - 1, 1])
    assert loss.item() == pytest.approx(math.log(k), rel=1e-14)


def test_cross_entropy_stable_for_large_logits():
    loss = ops.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [1])
    assert loss.item() == pytest.approx(1000.0)


def test_weight_standardize_examples():
    np.testing.assert_array_equal(ops.weight_standardize(Tensor(np.full(5, 2.0))).data, np.zeros(5))
    out = ops.weight_standardize(Tensor([-1.0, 1.0])).data
    np.testing.assert_allclose(out, [-1 / (1 + 1e-5), 1 / (1 + 1e-5)], rtol=1e-15)
    w = rand(8, 3, 3, 3, seed=4)
    assert abs(ops.weight_standardize(w).data.mean()) <= 1e-7


@pytest.mark.parametrize(
    "name,make",
    [
        ("add_broadcast", lambda a, b: ops.sum(ops.mul(ops.add(a, b), a))),
        ("sub", lambda a, b: ops.sum(ops.mul(ops.sub(a, b), ops.sub(a, b)))),
        ("relu_mean", lambda a, b: ops.mean(ops.mul(ops.relu(a), b))),
        ("standardize", lambda a, b: ops.sum(ops.mul(ops.weight_standardize(a), b))),
        ("reshape", lambda a, b: ops.sum(ops.mul(ops.flatten(ops.reshape(a, (3, 2, 2))), ops.reshape(ops.add(a, b), (3, 4))))),
    ],
)
def test_elementwise_gradients(name, make):
    a = rand(3, 4, seed=1)
    b = rand(1, 4, seed=2) if name == "add_broadcast" else rand(3, 4, seed=2)
    check_grads(lambda: make(a, b), [a, b])


def test_dense_and_cross_entropy_gradients():
    x, w, b = rand(5, 4, seed=1), rand(3, 4, seed=2), rand(3, seed=3)
    labels = [0, 1, 2, 1, 0]
    check_grads(lambda: ops.softmax_cross_entropy(ops.dense(x, w, b), labels), [x, w, b])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients(stride, padding):
    x, w, b = rand(2, 2, 5, 5, seed=1), rand(3, 2, 3, 3, seed=2), rand(3, seed=3)
    g = rand(*ops.conv2d(x, w, b, stride, padding).shape, seed=4, requires_grad=False)
    check_grads(lambda: ops.sum(ops.mul(ops.conv2d(x, w, b, stride, padding), g)), [x, w, b])


@pytest.mark.parametrize(
    "call",
    [
        lambda: ops.dense(rand(2, 3), rand(4, 5)),
        lambda: ops.conv2d(rand(1, 2, 4, 4), rand(1, 3, 3, 3)),
        lambda: ops.conv2d(rand(1, 1, 2, 2), rand(1, 1, 3, 3)),
        lambda: ops.add(rand(2, 3), rand(4)),
        lambda: ops.softmax_cross_entropy(rand(3, 2), [0, 1]),
    ],
)
def test_shape_errors_name_the_op(call):
    with pytest.raises(ShapeError) as info:
        call()
    assert info.value.op in str(info.value)
    assert "(" in str(info.value)


# -- fake quantizer ----------------------------------------------------------------


def test_full_precision_quantizer_is_identity():
    q = FakeQuantizer(32, QuantizerKind.daq(), Role.WEIGHT)
    x = rand(3)
    assert q(x) is x
    assert q.parameters() == []


def test_one_bit_weights_are_signs():
    q = FakeQuantizer(1, QuantizerKind.daq(), Role.WEIGHT)
    out = q(ops.weight_standardize(rand(16, 4, 3, 3, seed=2)))
    assert set(np.unique(out.data)) <= {-1.0, 1.0}


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_round_mode_is_staircase(kind):
    q = FakeQuantizer(2, kind, Role.ACTIVATION, lower=-1, upper=1)
    x = Tensor(np.linspace(-1.5, 1.5, 301))
    ref = FakeQuantizer(2, QuantizerKind.daq(), Role.ACTIVATION, lower=-1, upper=1)
    np.testing.assert_array_equal(q(x, "round").data, ref(x, "train").data)
    assert set(np.round(q(x, "round").data * 3, 12)) <= {0.0, 1.0, 2.0, 3.0}


def test_quantizer_gap_statistics():
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, 1000))
    daq = FakeQuantizer(2, QuantizerKind.daq(), Role.ACTIVATION, lower=-1, upper=1)
    soft = FakeQuantizer(2, QuantizerKind.kernel(4), Role.ACTIVATION, lower=-1, upper=1)
    daq(x)
    soft(x)
    assert daq.mean_gap == 0.0
    assert soft.mean_gap > 0
    assert daq.mean_beta > soft.mean_beta == 4.0


def test_frozen_lower_gets_no_gradient():
    q = FakeQuantizer(2, QuantizerKind.daq(), Role.ACTIVATION, lower=0, upper=2, lower_trainable=False)
    x = Tensor(np.linspace(0.1, 1.9, 7), requires_grad=True)
    grads = backward(ops.sum(q(x)), q.parameters())
    assert q.lower not in grads
    assert q.upper in grads


def test_quantized_conv_passthrough():
    x, w, s = rand(2, 2, 4, 4, seed=1), rand(3, 2, 3, 3, seed=2), Tensor([1.7])
    off = FakeQuantizer(32, QuantizerKind.daq(), Role.WEIGHT)
    out = quantized_conv(x, w, off, off, s, padding=1)
    np.testing.assert_allclose(out.data, 1.7 * ops.conv2d(x, w, padding=1).data, rtol=1e-15)


@pytest.mark.parametrize("kind", [QuantizerKind.daq(), QuantizerKind.kernel(4)], ids=str)
def test_quantized_conv_scale_gradient(kind):
    x = Tensor(np.random.default_rng(1).uniform(-2, 2, (1, 1, 4, 4)))
    w = ops.weight_standardize(rand(1, 1, 3, 3, seed=2)).detach()
    s = Tensor([0.8], requires_grad=True)
    wq = FakeQuantizer(2, kind, Role.WEIGHT)
    aq = FakeQuantizer(2, kind, Role.ACTIVATION, lower=-3, upper=3)
    g = rand(1, 1, 4, 4, seed=3, requires_grad=False)
    f = lambda: ops.sum(ops.mul(quantized_conv(x, w, wq, aq, s, padding=1), g))  # noqa: E731
    analytic = backward(f(), [s])[s]
    numeric = numeric_grad(lambda: f().item(), s)
    assert rel_error(float(analytic[0]), float(numeric[0])) <= 1e-4


# -- whole-network probes ------------------------------------------------------------


def mlp_specs(kind, quantize_first=False, bits=2):
    q = dict(weight_quantizer=kind, activation_quantizer=kind, weight_bits=bits, activation_bits=bits)
    return [
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, 6, 8, **(q if quantize_first else {})),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.DENSE, 8, 8, **q),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.DENSE, 8, 3, **q),
    ]


def conv_specs(kind, bits=2):
    q = dict(weight_quantizer=kind, activation_quantizer=kind, weight_bits=bits, activation_bits=bits)
    return [
        LayerSpec(LayerKind.CONV2D, 1, 2, kernel_size=3, padding=1, **q),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.CONV2D, 2, 3, kernel_size=3, stride=2, padding=1, **q),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, 3 * 3 * 3, 4, **q),
    ]


def prepared(specs, sample_shape, seed=0, beta=None):
    """Case factory for :func:`probe_clear_of_kinks`: fresh weights and batch per attempt."""

    def make(attempt):
        s = 1000 * seed + attempt
        net = Network(specs, seed=s)
        rng = np.random.default_rng(s + 7)
        # nonzero biases keep pre-activations off the ReLU kink after a staircase forward
        for layer in net.weight_layers():
            layer.bias.data[...] = rng.normal(0, 0.5, layer.bias.shape)
        init_quantizers(net, rng.normal(size=(16, *sample_shape)))
        net.set_beta(beta)
        return net, Tensor(rng.normal(size=(4, *sample_shape))), rng.integers(0, 3, 4)

    return make


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
@pytest.mark.parametrize("quantize_first", [False, True], ids=["middle", "all"])
def test_mlp_probe(kind, quantize_first):
    # annealed quantizers are probed mid-schedule
    beta = 12.0 if kind.name.value == "anneal" else None
    report = probe_clear_of_kinks(prepared(mlp_specs(kind, quantize_first), (6, 1, 1), beta=beta), n_params=10, seed=1)
    assert len(report.results) == 10
    assert report.worst <= 1e-4, [(r.name, r.analytic, r.numeric) for r in report.results]


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_conv_probe(kind):
    report = probe_clear_of_kinks(prepared(conv_specs(kind), (1, 5, 5)), n_params=10, seed=2)
    assert report.worst <= 1e-4, [(r.name, r.analytic, r.numeric) for r in report.results]


def test_probe_covers_quantizer_parameters():
    make = prepared(mlp_specs(QuantizerKind.daq()), (6, 1, 1))
    net, x, labels = make(0)
    report = probe_network(net, x, labels, params=net.quant_params(), n_params=10, seed=3)
    assert {r.name.rsplit(".", 1)[-1] for r in report.results} >= {"upper", "scale"}
    assert report.worst <= 1e-4


def test_capture_reproduces_forward():
    net, x, _ = prepared(mlp_specs(QuantizerKind.sigmoid(4)), (6, 1, 1))(0)
    before = net(x).data
    net.capture()
    try:
        np.testing.assert_array_equal(net(x).data, before)
        np.testing.assert_array_equal(net(x).data, before)
    finally:
        net.release()


def test_network_f32():
    net = Network(mlp_specs(QuantizerKind.daq()), dtype="f32")
    out = net(Tensor(np.ones((2, 6, 1, 1)), dtype="f32"))
    assert out.dtype == np.float32
