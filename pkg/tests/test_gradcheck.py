"""Finite-difference validation of every analytic gradient in the stack."""

import numpy as np
import pytest

from zoneseg import ops
from zoneseg.gradcheck import finite_diff_check, projection_array
from zoneseg.model import NetConfig, build_net

OPS_TOL = 1e-4
NET_TOL = 1e-3


def test_harness_accepts_exact_gradient():
    rng = np.random.default_rng(0)

    def func(inputs):
        x = inputs["x"]
        return float((x**2).sum()), {"x": 2.0 * x}

    report = finite_diff_check(func, {"x": rng.standard_normal((3, 4))}, rng=rng)
    assert report.passed
    assert report.max_rel_error < 1e-8
    assert "PASS" in report.summary()


def test_harness_detects_wrong_gradient():
    rng = np.random.default_rng(1)

    def func(inputs):
        x = inputs["x"]
        return float((x**2).sum()), {"x": 2.02 * x}  # 1% off

    report = finite_diff_check(func, {"x": rng.standard_normal(8) + 1.0}, rng=rng)
    assert not report.passed
    assert "FAIL" in report.summary()
    worst = report.worst()
    assert worst is not None and worst.input_name == "x"


def test_harness_rejects_float32():
    rng = np.random.default_rng(2)

    def func(inputs):
        return 0.0, {"x": np.zeros_like(inputs["x"])}

    with pytest.raises(TypeError, match="float64"):
        finite_diff_check(func, {"x": np.zeros(3, dtype=np.float32)}, rng=rng)


def test_harness_rejects_gradient_shape_mismatch():
    rng = np.random.default_rng(3)

    def func(inputs):
        return 0.0, {"x": np.zeros(5)}

    with pytest.raises(ValueError, match="shape"):
        finite_diff_check(func, {"x": np.zeros(3)}, rng=rng)


def _check(func, inputs, seed, tol=OPS_TOL):
    report = finite_diff_check(func, inputs, rng=np.random.default_rng(seed), tolerance=tol)
    assert report.passed, report.summary()


class TestOpGradients:
    def test_conv2d(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride, pad in [(1, 1), (2, 1), (1, 0)]:
            y0, _ = ops.conv2d(x, w, b, stride, pad)
            proj = projection_array(rng, y0.shape)

            def func(inputs):
                y, cache = ops.conv2d(inputs["x"], inputs["w"], inputs["b"], stride, pad)
                dx, dw, db = ops.conv2d_backward(proj, cache)
                return float((y * proj).sum()), {"x": dx, "w": dw, "b": db}

            _check(func, {"x": x, "w": w, "b": b}, seed=21)

    def test_transposed_conv2d(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((2, 4, 3, 3))
        w = rng.standard_normal((4, 2, 2, 2))
        b = rng.standard_normal(2)
        y0, _ = ops.transposed_conv2d(x, w, b, 2)
        proj = projection_array(rng, y0.shape)

        def func(inputs):
            y, cache = ops.transposed_conv2d(inputs["x"], inputs["w"], inputs["b"], 2)
            dx, dw, db = ops.transposed_conv2d_backward(proj, cache)
            return float((y * proj).sum()), {"x": dx, "w": dw, "b": db}

        _check(func, {"x": x, "w": w, "b": b}, seed=23)

    def test_maxpool(self):
        rng = np.random.default_rng(24)
        x = rng.standard_normal((2, 3, 6, 6))
        proj = projection_array(rng, (2, 3, 3, 3))

        def func(inputs):
            y, cache = ops.maxpool2x2(inputs["x"])
            return float((y * proj).sum()), {"x": ops.maxpool2x2_backward(proj, cache)}

        _check(func, {"x": x}, seed=25)

    def test_nearest_upsample(self):
        rng = np.random.default_rng(26)
        x = rng.standard_normal((2, 3, 4, 4))
        proj = projection_array(rng, (2, 3, 8, 8))

        def func(inputs):
            y = ops.nearest_upsample2x(inputs["x"])
            return float((y * proj).sum()), {"x": ops.nearest_upsample2x_backward(proj)}

        _check(func, {"x": x}, seed=27)

    def test_relu(self):
        rng = np.random.default_rng(28)
        x = rng.standard_normal((2, 3, 5, 5))
        proj = projection_array(rng, x.shape)

        def func(inputs):
            y = ops.relu(inputs["x"])
            return float((y * proj).sum()), {"x": ops.relu_backward(proj, inputs["x"])}

        _check(func, {"x": x}, seed=29)

    def test_add_and_concat(self):
        rng = np.random.default_rng(30)
        a = rng.standard_normal((1, 2, 4, 4))
        b = rng.standard_normal((1, 2, 4, 4))
        proj = projection_array(rng, a.shape)

        def add_func(inputs):
            y = ops.add(inputs["a"], inputs["b"])
            ga, gb = ops.add_backward(proj)
            return float((y * proj).sum()), {"a": ga, "b": gb}

        _check(add_func, {"a": a, "b": b}, seed=31)
        proj2 = projection_array(rng, (1, 4, 4, 4))

        def cat_func(inputs):
            y = ops.concat_channels(inputs["a"], inputs["b"])
            ga, gb = ops.concat_channels_backward(proj2, 2)
            return float((y * proj2).sum()), {"a": ga, "b": gb}

        _check(cat_func, {"a": a, "b": b}, seed=32)

    @pytest.mark.parametrize("train", [True, False], ids=["train", "eval"])
    def test_batchnorm(self, train):
        rng = np.random.default_rng(33)
        x = rng.standard_normal((3, 2, 4, 4))
        gamma = rng.standard_normal(2) + 1.0
        beta = rng.standard_normal(2)
        rm = rng.standard_normal(2) * 0.1
        rv = np.abs(rng.standard_normal(2)) + 0.5
        proj = projection_array(rng, x.shape)

        def func(inputs):
            y, cache, _, _ = ops.batchnorm2d(
                inputs["x"], inputs["gamma"], inputs["beta"], rm, rv, train=train
            )
            dx, dgamma, dbeta = ops.batchnorm2d_backward(proj, cache)
            return float((y * proj).sum()), {"x": dx, "gamma": dgamma, "beta": dbeta}

        _check(func, {"x": x, "gamma": gamma, "beta": beta}, seed=34)

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(35)
        logits = rng.standard_normal((2, 3, 4, 4))
        labels = rng.integers(0, 3, size=(2, 4, 4))
        onehot = np.zeros((2, 3, 4, 4))
        for c in range(3):
            onehot[:, c][labels == c] = 1.0

        def func(inputs):
            probs = ops.softmax_channels(inputs["logits"])
            loss = ops.categorical_cross_entropy(probs, onehot)
            dprobs = ops.categorical_cross_entropy_backward(probs, onehot)
            return loss, {"logits": ops.softmax_channels_backward(dprobs, probs)}

        _check(func, {"logits": logits}, seed=36)


def _net_inputs_and_func(config, *, train, seed):
    net = build_net(config, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    n, h, w = 2, 8, 8
    x = rng.standard_normal((n, config.in_channels, h, w))
    labels = rng.integers(0, config.num_classes, size=(n, h, w))
    onehot = np.zeros((n, config.num_classes, h, w))
    for c in range(config.num_classes):
        onehot[:, c][labels == c] = 1.0
    inputs = {name: p.value.copy() for name, p in net.params.items()}
    inputs["input"] = x

    def func(values):
        for name, p in net.params.items():
            p.value[...] = values[name]
        probs, tape = net.forward(values["input"], train=train)
        loss = ops.categorical_cross_entropy(probs, onehot)
        net.zero_grads()
        din = net.backward(ops.categorical_cross_entropy_backward(probs, onehot), tape)
        grads = {name: p.grad.copy() for name, p in net.params.items()}
        grads["input"] = din
        return loss, grads

    return inputs, func


@pytest.mark.parametrize(
    "skip_mode,upsample",
    [("addition", "tconv"), ("concatenation", "tconv"), ("addition", "nearest")],
)
def test_whole_net_gradient(skip_mode, upsample):
    config = NetConfig(
        in_channels=2,
        num_classes=2,
        depth=2,
        base_channels=2,
        skip_mode=skip_mode,
        use_norm=True,
        upsample=upsample,
    )
    inputs, func = _net_inputs_and_func(config, train=True, seed=40)
    report = finite_diff_check(
        func, inputs, rng=np.random.default_rng(41), tolerance=NET_TOL, probes_per_input=3
    )
    assert report.passed, report.summary()


def test_whole_net_gradient_eval_mode():
    config = NetConfig(in_channels=1, num_classes=3, depth=1, base_channels=3)
    inputs, func = _net_inputs_and_func(config, train=False, seed=42)
    report = finite_diff_check(
        func, inputs, rng=np.random.default_rng(43), tolerance=NET_TOL, probes_per_input=4
    )
    assert report.passed, report.summary()


def test_whole_net_gradient_without_norm():
    config = NetConfig(in_channels=1, num_classes=2, depth=1, base_channels=2, use_norm=False)
    inputs, func = _net_inputs_and_func(config, train=True, seed=44)
    report = finite_diff_check(
        func, inputs, rng=np.random.default_rng(45), tolerance=NET_TOL, probes_per_input=4
    )
    assert report.passed, report.summary()
