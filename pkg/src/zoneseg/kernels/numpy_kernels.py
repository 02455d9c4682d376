"""Pure-numpy convolution, transposed-convolution, and pooling kernels.

This backend expresses every kernel as strided window views plus BLAS
contractions, so it needs nothing beyond numpy.  It is the fallback when
numba is unavailable and the reference the numba backend is tested
against.

Array layouts follow the package-wide conventions: activations are
``(batch, channels, height, width)``, convolution weights are
``(out_channels, in_channels, kh, kw)``, transposed-convolution weights
are ``(in_channels, out_channels, kh, kw)``.  Convolution is
cross-correlation: no kernel flip anywhere.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def _window_view(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding ``(kh, kw)`` windows of ``x`` as a zero-copy strided view.

    Returns shape ``(n, c, oh, ow, kh, kw)``.  The view aliases ``x`` and
    must only be read.
    """
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2], w.shape[3]
    win = _window_view(x, kh, kw, stride)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_input_grad(
    gy: np.ndarray, w: np.ndarray, stride: int, pad: int, in_h: int, in_w: int
) -> np.ndarray:
    n, co, oh, ow = gy.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    # Dilate the output grad by the stride, embed it in a (kh-1-pad)-padded
    # canvas, and correlate with the spatially flipped, io-swapped weight.
    canvas = np.zeros((n, co, in_h + kh - 1, in_w + kw - 1), dtype=gy.dtype)
    oi = kh - 1 - pad
    oj = kw - 1 - pad
    canvas[:, :, oi : oi + (oh - 1) * stride + 1 : stride,
           oj : oj + (ow - 1) * stride + 1 : stride] = gy
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    win = _window_view(canvas, kh, kw, 1)
    dx = np.tensordot(win, wf, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv2d_weight_grad(
    x: np.ndarray, gy: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _window_view(x, kh, kw, stride)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))


def tconv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    y = np.zeros((n, co, oh, ow), dtype=x.dtype)
    # Each kernel tap scatters one strided copy of x into the output; taps
    # overlap only when stride < kernel, and += handles that.
    for ki in range(kh):
        for kj in range(kw):
            part = np.tensordot(x, w[:, :, ki, kj], axes=([1], [0]))
            y[:, :, ki : ki + (h - 1) * stride + 1 : stride,
              kj : kj + (wd - 1) * stride + 1 : stride] += part.transpose(0, 3, 1, 2)
    return y


def tconv2d_input_grad(gy: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    # The adjoint of scatter is gather: a strided correlation of the output
    # grad with the same weight, whose leading axis now acts as out_channels.
    return conv2d_forward(gy, w, stride, 0)


def tconv2d_weight_grad(
    x: np.ndarray, gy: np.ndarray, stride: int, kh: int, kw: int
) -> np.ndarray:
    win = _window_view(gy, kh, kw, stride)
    return np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    blocks = (
        x.reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    # argmax returns the first maximum, and block cells are ordered by flat
    # input index, so ties resolve to the lowest flat index.
    a = blocks.argmax(axis=4)
    y = np.take_along_axis(blocks, a[..., None], axis=4)[..., 0]
    rows = np.arange(oh)[:, None] * 2
    cols = np.arange(ow)[None, :] * 2
    idx = (rows + a // 2) * w + (cols + a % 2)
    return y, idx.astype(np.int64)


def maxpool2x2_backward(gy: np.ndarray, idx: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    n, c = gy.shape[0], gy.shape[1]
    dx = np.zeros((n, c, in_h * in_w), dtype=gy.dtype)
    np.put_along_axis(dx, idx.reshape(n, c, -1), gy.reshape(n, c, -1), axis=2)
    return dx.reshape(n, c, in_h, in_w)
