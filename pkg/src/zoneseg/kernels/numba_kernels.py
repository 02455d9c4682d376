"""Numba-jitted convolution, transposed-convolution, and pooling kernels.

Same contracts as the numpy backend (see numpy_kernels.py for the layout
conventions).  Padding and trimming happen here in the wrappers; the
jitted inner loops are branch-free over contiguous rows so LLVM can
vectorise them.

The weight-gradient kernels reduce along image rows and carry
``fastmath=True`` so the reduction vectorises.  That only licenses a
fixed reassociation chosen at compile time: results are still identical
from run to run, which is what the package's determinism guarantee
needs.  Forward and input-gradient kernels accumulate elementwise, gain
nothing from reassociation, and stay strict IEEE.
"""

from __future__ import annotations

import numpy as np
from numba import njit

BACKEND_NAME = "numba"


@njit(cache=True)
def _conv_fwd_s1(xp, w, y):
    n, co, oh, ow = y.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for b in range(n):
        for oc in range(co):
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[oc, c, ki, kj]
                        for i in range(oh):
                            for j in range(ow):
                                y[b, oc, i, j] += wv * xp[b, c, i + ki, j + kj]


@njit(cache=True)
def _conv_fwd_gen(xp, w, y, stride):
    n, co, oh, ow = y.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for b in range(n):
        for oc in range(co):
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[oc, c, ki, kj]
                        for i in range(oh):
                            ii = i * stride + ki
                            for j in range(ow):
                                y[b, oc, i, j] += wv * xp[b, c, ii, j * stride + kj]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, hp, wp = x.shape
    co, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    y = np.zeros((n, co, oh, ow), dtype=x.dtype)
    if stride == 1:
        _conv_fwd_s1(x, w, y)
    else:
        _conv_fwd_gen(x, w, y, stride)
    return y


@njit(cache=True)
def _conv_dx_s1(gy, w, dxp):
    n, co, oh, ow = gy.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for b in range(n):
        for oc in range(co):
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[oc, c, ki, kj]
                        for i in range(oh):
                            for j in range(ow):
                                dxp[b, c, i + ki, j + kj] += wv * gy[b, oc, i, j]


@njit(cache=True)
def _conv_dx_gen(gy, w, dxp, stride):
    n, co, oh, ow = gy.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for b in range(n):
        for oc in range(co):
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[oc, c, ki, kj]
                        for i in range(oh):
                            ii = i * stride + ki
                            for j in range(ow):
                                dxp[b, c, ii, j * stride + kj] += wv * gy[b, oc, i, j]


def conv2d_input_grad(
    gy: np.ndarray, w: np.ndarray, stride: int, pad: int, in_h: int, in_w: int
) -> np.ndarray:
    n = gy.shape[0]
    ci = w.shape[1]
    dxp = np.zeros((n, ci, in_h + 2 * pad, in_w + 2 * pad), dtype=gy.dtype)
    if stride == 1:
        _conv_dx_s1(gy, w, dxp)
    else:
        _conv_dx_gen(gy, w, dxp, stride)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


@njit(cache=True, fastmath=True)
def _conv_dw_s1(xp, gy, dw):
    n, co, oh, ow = gy.shape
    ci, kh, kw = dw.shape[1], dw.shape[2], dw.shape[3]
    for b in range(n):
        for oc in range(co):
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for i in range(oh):
                            for j in range(ow):
                                acc += gy[b, oc, i, j] * xp[b, c, i + ki, j + kj]
                        dw[oc, c, ki, kj] += acc


@njit(cache=True, fastmath=True)
def _conv_dw_gen(xp, gy, dw, stride):
    n, co, oh, ow = gy.shape
    ci, kh, kw = dw.shape[1], dw.shape[2], dw.shape[3]
    for b in range(n):
        for oc in range(co):
            for c in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for i in range(oh):
                            ii = i * stride + ki
                            for j in range(ow):
                                acc += gy[b, oc, i, j] * xp[b, c, ii, j * stride + kj]
                        dw[oc, c, ki, kj] += acc


def conv2d_weight_grad(
    x: np.ndarray, gy: np.ndarray, stride: int, pad: int, kh: int, kw: int
) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    co, ci = gy.shape[1], x.shape[1]
    dw = np.zeros((co, ci, kh, kw), dtype=x.dtype)
    if stride == 1:
        _conv_dw_s1(x, gy, dw)
    else:
        _conv_dw_gen(x, gy, dw, stride)
    return dw


@njit(cache=True)
def _tconv_fwd(x, w, y, stride):
    n, ci, h, wd = x.shape
    co, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for b in range(n):
        for c in range(ci):
            for oc in range(co):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[c, oc, ki, kj]
                        for i in range(h):
                            ii = i * stride + ki
                            for j in range(wd):
                                y[b, oc, ii, j * stride + kj] += wv * x[b, c, i, j]


def tconv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, _, h, wd = x.shape
    co, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    y = np.zeros((n, co, (h - 1) * stride + kh, (wd - 1) * stride + kw), dtype=x.dtype)
    _tconv_fwd(x, w, y, stride)
    return y


def tconv2d_input_grad(gy: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    # Adjoint of the forward scatter: strided correlation with the same
    # weight, whose leading axis acts as out_channels.
    return conv2d_forward(gy, w, stride, 0)


@njit(cache=True, fastmath=True)
def _tconv_dw(x, gy, dw, stride):
    n, ci, h, wd = x.shape
    co, kh, kw = dw.shape[1], dw.shape[2], dw.shape[3]
    for b in range(n):
        for c in range(ci):
            for oc in range(co):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for i in range(h):
                            ii = i * stride + ki
                            for j in range(wd):
                                acc += x[b, c, i, j] * gy[b, oc, ii, j * stride + kj]
                        dw[c, oc, ki, kj] += acc


def tconv2d_weight_grad(
    x: np.ndarray, gy: np.ndarray, stride: int, kh: int, kw: int
) -> np.ndarray:
    ci, co = x.shape[1], gy.shape[1]
    dw = np.zeros((ci, co, kh, kw), dtype=x.dtype)
    _tconv_dw(x, gy, dw, stride)
    return dw


@njit(cache=True)
def _maxpool_fwd(x, y, idx):
    n, c, h, w = x.shape
    oh, ow = y.shape[2], y.shape[3]
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    bi, bj = 2 * i, 2 * j
                    best = x[b, ch, bi, bj]
                    bidx = bi * w + bj
                    # Strict > keeps the lowest flat index on ties.
                    if x[b, ch, bi, bj + 1] > best:
                        best = x[b, ch, bi, bj + 1]
                        bidx = bi * w + bj + 1
                    if x[b, ch, bi + 1, bj] > best:
                        best = x[b, ch, bi + 1, bj]
                        bidx = (bi + 1) * w + bj
                    if x[b, ch, bi + 1, bj + 1] > best:
                        best = x[b, ch, bi + 1, bj + 1]
                        bidx = (bi + 1) * w + bj + 1
                    y[b, ch, i, j] = best
                    idx[b, ch, i, j] = bidx


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int64)
    _maxpool_fwd(x, y, idx)
    return y, idx


@njit(cache=True)
def _maxpool_bwd(gy, idx, dx_flat):
    n, c, oh, ow = gy.shape
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    dx_flat[b, ch, idx[b, ch, i, j]] = gy[b, ch, i, j]


def maxpool2x2_backward(gy: np.ndarray, idx: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    n, c = gy.shape[0], gy.shape[1]
    dx = np.zeros((n, c, in_h * in_w), dtype=gy.dtype)
    _maxpool_bwd(gy, idx, dx)
    return dx.reshape(n, c, in_h, in_w)
