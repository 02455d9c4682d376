"""Kernel backends: loop-reference oracles, backend parity, adjoints."""

import numpy as np
import pytest

from zoneseg.kernels import numba_kernels, numpy_kernels

BACKENDS = [numpy_kernels, numba_kernels]
IDS = ["numpy", "numba"]


def ref_conv2d(x, w, stride, pad):
    """Direct cross-correlation loops: the independent oracle."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, co, oh, ow))
    for b in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    w[oc, c, ki, kj]
                                    * xp[b, c, i * stride + ki, j * stride + kj]
                                )
                    y[b, oc, i, j] = acc
    return y


def ref_tconv2d(x, w, stride):
    """Scatter loops for the transposed convolution oracle."""
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    y = np.zeros((n, co, oh, ow))
    for b in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    for oc in range(co):
                        for ki in range(kh):
                            for kj in range(kw):
                                y[b, oc, i * stride + ki, j * stride + kj] += (
                                    x[b, c, i, j] * w[c, oc, ki, kj]
                                )
    return y


def _cases(rng):
    # (n, ci, co, h, w, k, stride, pad) sweep kept small enough for the
    # loop oracle.
    fixed = [
        (1, 1, 1, 4, 4, 3, 1, 1),
        (2, 3, 4, 5, 6, 3, 1, 1),
        (1, 2, 3, 6, 6, 3, 2, 1),
        (2, 2, 2, 4, 5, 1, 1, 0),
        (1, 3, 2, 5, 5, 2, 2, 0),
        (2, 1, 2, 7, 4, 3, 3, 2),
    ]
    for case in fixed:
        yield case
    for _ in range(4):
        k = int(rng.integers(1, 4))
        yield (
            int(rng.integers(1, 3)),
            int(rng.integers(1, 4)),
            int(rng.integers(1, 4)),
            int(rng.integers(k, 8)),
            int(rng.integers(k, 8)),
            k,
            int(rng.integers(1, 3)),
            int(rng.integers(0, k)),
        )


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_conv2d_forward_matches_loop_oracle(impl):
    rng = np.random.default_rng(10)
    for n, ci, co, h, wd, k, stride, pad in _cases(rng):
        x = rng.standard_normal((n, ci, h, wd))
        w = rng.standard_normal((co, ci, k, k))
        got = impl.conv2d_forward(x, w, stride, pad)
        want = ref_conv2d(x, w, stride, pad)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_tconv2d_forward_matches_loop_oracle(impl):
    rng = np.random.default_rng(11)
    for _ in range(6):
        n = int(rng.integers(1, 3))
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        h = int(rng.integers(2, 6))
        wd = int(rng.integers(2, 6))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        x = rng.standard_normal((n, ci, h, wd))
        w = rng.standard_normal((ci, co, k, k))
        got = impl.tconv2d_forward(x, w, stride)
        want = ref_tconv2d(x, w, stride)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_conv2d_grads_are_adjoints(impl):
    # <conv(x, w), gy> = <x, input_grad(gy, w)> = <w, weight_grad(x, gy)>
    # characterizes both gradients exactly.
    rng = np.random.default_rng(12)
    for n, ci, co, h, wd, k, stride, pad in _cases(rng):
        x = rng.standard_normal((n, ci, h, wd))
        w = rng.standard_normal((co, ci, k, k))
        y = impl.conv2d_forward(x, w, stride, pad)
        gy = rng.standard_normal(y.shape)
        dx = impl.conv2d_input_grad(gy, w, stride, pad, h, wd)
        dw = impl.conv2d_weight_grad(x, gy, stride, pad, k, k)
        lhs = float(np.vdot(y, gy))
        assert dx.shape == x.shape
        assert dw.shape == w.shape
        assert abs(lhs - float(np.vdot(x, dx))) <= 1e-10 * max(1.0, abs(lhs))
        assert abs(lhs - float(np.vdot(w, dw))) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_tconv2d_is_conv2d_adjoint(impl):
    # The weight layout (Cin, Cout, k, k) makes tconv the literal adjoint
    # of the zero-padded strided conv with the same weight.
    rng = np.random.default_rng(13)
    for _ in range(8):
        n = int(rng.integers(1, 3))
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        oh = int(rng.integers(1, 5))
        x_h = (oh - 1) * stride + k
        ow = int(rng.integers(1, 5))
        x_w = (ow - 1) * stride + k
        x = rng.standard_normal((n, ci, x_h, x_w))
        w = rng.standard_normal((co, ci, k, k))
        y = impl.conv2d_forward(x, w, stride, 0)
        u = rng.standard_normal(y.shape)
        back = impl.tconv2d_forward(u, w, stride)
        lhs = float(np.vdot(y, u))
        rhs = float(np.vdot(x, back))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_tconv2d_grads_are_adjoints(impl):
    rng = np.random.default_rng(14)
    for _ in range(8):
        n = int(rng.integers(1, 3))
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        h = int(rng.integers(2, 6))
        wd = int(rng.integers(2, 6))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        x = rng.standard_normal((n, ci, h, wd))
        w = rng.standard_normal((ci, co, k, k))
        y = impl.tconv2d_forward(x, w, stride)
        gy = rng.standard_normal(y.shape)
        dx = impl.tconv2d_input_grad(gy, w, stride)
        dw = impl.tconv2d_weight_grad(x, gy, stride, k, k)
        lhs = float(np.vdot(y, gy))
        assert dx.shape == x.shape
        assert dw.shape == w.shape
        assert abs(lhs - float(np.vdot(x, dx))) <= 1e-10 * max(1.0, abs(lhs))
        assert abs(lhs - float(np.vdot(w, dw))) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_maxpool_forward_values_and_ties(impl):
    rng = np.random.default_rng(15)
    for _ in range(5):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h = 2 * int(rng.integers(1, 5))
        wd = 2 * int(rng.integers(1, 5))
        x = rng.standard_normal((n, c, h, wd))
        y, idx = impl.maxpool2x2_forward(x)
        assert y.shape == (n, c, h // 2, wd // 2)
        for b in range(n):
            for ch in range(c):
                for i in range(h // 2):
                    for j in range(wd // 2):
                        block = x[b, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                        assert y[b, ch, i, j] == block.max()
    # All-equal blocks must pick the lowest flat index (row-major first).
    x = np.zeros((1, 1, 2, 2))
    y, idx = impl.maxpool2x2_forward(x)
    assert int(idx[0, 0, 0, 0]) == 0
    x = np.zeros((1, 1, 2, 4))
    x[0, 0, 1, 2] = 5.0
    x[0, 0, 1, 3] = 5.0
    _, idx = impl.maxpool2x2_forward(x)
    # Flat index i*w + j of the first maximum in the second block.
    assert int(idx[0, 0, 0, 1]) == 1 * 4 + 2


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_maxpool_backward_routes_to_argmax(impl):
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 3, 6, 4))
    y, idx = impl.maxpool2x2_forward(x)
    gy = rng.standard_normal(y.shape)
    dx = impl.maxpool2x2_backward(gy, idx, 6, 4)
    assert dx.shape == x.shape
    # Adjoint identity and support check: the gradient lands exactly on
    # the selected positions.
    lhs = float(np.vdot(y, gy))
    assert abs(lhs - float(np.vdot(x, dx))) <= 1e-12 * max(1.0, abs(lhs))
    for b in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(2):
                    block = dx[b, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    assert np.count_nonzero(block) <= 1
                    assert block.sum() == gy[b, c, i, j]


def test_backends_agree_bitwise_on_maxpool():
    # Pooling involves no arithmetic, only selection, so the backends
    # must agree exactly, ties included.
    rng = np.random.default_rng(17)
    x = rng.standard_normal((2, 4, 8, 8))
    x[0, 0, :2, :2] = 1.0  # forced tie
    y_np, idx_np = numpy_kernels.maxpool2x2_forward(x)
    y_nb, idx_nb = numba_kernels.maxpool2x2_forward(x)
    assert np.array_equal(y_np, y_nb)
    assert np.array_equal(idx_np, idx_nb)


def test_backends_agree_to_roundoff_on_conv():
    rng = np.random.default_rng(18)
    for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
        x = rng.standard_normal((2, 3, 12, 10))
        w = rng.standard_normal((4, 3, 3, 3))
        a = numpy_kernels.conv2d_forward(x, w, stride, pad)
        b = numba_kernels.conv2d_forward(x, w, stride, pad)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        gy = rng.standard_normal(a.shape)
        da = numpy_kernels.conv2d_input_grad(gy, w, stride, pad, 12, 10)
        db = numba_kernels.conv2d_input_grad(gy, w, stride, pad, 12, 10)
        np.testing.assert_allclose(da, db, rtol=1e-12, atol=1e-12)
        wa = numpy_kernels.conv2d_weight_grad(x, gy, stride, pad, 3, 3)
        wb = numba_kernels.conv2d_weight_grad(x, gy, stride, pad, 3, 3)
        np.testing.assert_allclose(wa, wb, rtol=1e-11, atol=1e-11)


def test_numba_kernels_are_run_to_run_deterministic():
    # fastmath on the weight-grad reduction fixes one reassociation at
    # compile time; repeated calls must agree bitwise.
    rng = np.random.default_rng(19)
    x = rng.standard_normal((3, 4, 16, 16))
    w = rng.standard_normal((6, 4, 3, 3))
    gy = rng.standard_normal((3, 6, 16, 16))
    first = numba_kernels.conv2d_weight_grad(x, gy, 1, 1, 3, 3)
    for _ in range(3):
        again = numba_kernels.conv2d_weight_grad(x, gy, 1, 1, 3, 3)
        assert np.array_equal(first, again)


class TestBackendSelection:
    """ZONESEG_BACKEND is read at import, so each probe is a subprocess."""

    @staticmethod
    def _backend_name(env_value):
        import os
        import subprocess
        import sys

        env = dict(os.environ)
        if env_value is None:
            env.pop("ZONESEG_BACKEND", None)
        else:
            env["ZONESEG_BACKEND"] = env_value
        return subprocess.run(
            [sys.executable, "-c", "import zoneseg.kernels as k; print(k.backend_name)"],
            capture_output=True,
            text=True,
            env=env,
        )

    def test_explicit_choices(self):
        assert self._backend_name("numpy").stdout.strip() == "numpy"
        assert self._backend_name("numba").stdout.strip() == "numba"
        assert self._backend_name("auto").stdout.strip() == "numba"

    def test_unset_defaults_to_numba_when_available(self):
        assert self._backend_name(None).stdout.strip() == "numba"

    def test_unknown_value_fails_loudly(self):
        proc = self._backend_name("cuda")
        assert proc.returncode != 0
        assert "ZONESEG_BACKEND" in proc.stderr
