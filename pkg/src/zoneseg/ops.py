"""Differentiable tensor operations with explicit forward and backward.

Every op is a plain function.  Forward passes return the output plus
whatever cache the matching backward needs; backward passes take the
upstream gradient and that cache and return input gradients.  There is
no autograd tape: the network code wires calls together by hand, which
keeps the data flow auditable and the finite-difference harness simple.

Conventions, fixed package-wide:

- activations are ``(batch, channels, height, width)`` float64
- convolution is cross-correlation (no kernel flip)
- convolution weights are ``(out_channels, in_channels, kh, kw)``;
  transposed-convolution weights ``(in_channels, out_channels, kh, kw)``
- ReLU uses subgradient 0 at exactly 0
- softmax is stabilised by max subtraction per pixel
- cross entropy clamps probabilities at 1e-12 before the log
"""

from __future__ import annotations

import numpy as np

from . import kernels

CCE_CLAMP = 1e-12


def _require_nchw(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4D (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------- conv2d


def conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, tuple]:
    """Strided cross-correlation plus per-channel bias."""
    _require_nchw("conv2d input", x)
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be 4D (co, ci, kh, kw), got {w.shape}")
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {ci}"
        )
    if b.shape != (co,):
        raise ValueError(f"conv2d bias must have shape ({co},), got {b.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0 or padding > min(kh, kw) - 1:
        raise ValueError(
            f"conv2d padding must be in [0, kernel-1], got {padding} for "
            f"kernel ({kh}, {kw})"
        )
    h, wd = x.shape[2], x.shape[3]
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError(
            f"conv2d input {x.shape} too small for kernel ({kh}, {kw}) "
            f"with padding {padding}"
        )
    y = kernels.conv2d_forward(x, w, stride, padding)
    y += b[None, :, None, None]
    cache = (x, w, stride, padding)
    return y, cache


def conv2d_backward(gy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w, stride, padding = cache
    dx = kernels.conv2d_input_grad(gy, w, stride, padding, x.shape[2], x.shape[3])
    dw = kernels.conv2d_weight_grad(x, gy, stride, padding, w.shape[2], w.shape[3])
    db = gy.sum(axis=(0, 2, 3))
    return dx, dw, db


# ----------------------------------------------------- transposed conv2d


def transposed_conv2d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2
) -> tuple[np.ndarray, tuple]:
    """Fractionally strided convolution; output is ``(h-1)*stride + k``.

    With the default stride 2 and kernel 2 this exactly doubles the
    spatial size.  The weight layout ``(in, out, kh, kw)`` makes the op
    the literal adjoint of ``conv2d`` with the same weight, stride, and
    zero padding.
    """
    _require_nchw("transposed_conv2d input", x)
    if w.ndim != 4:
        raise ValueError(
            f"transposed_conv2d weight must be 4D (ci, co, kh, kw), got {w.shape}"
        )
    ci, co = w.shape[0], w.shape[1]
    if x.shape[1] != ci:
        raise ValueError(
            f"transposed_conv2d channel mismatch: input has {x.shape[1]} "
            f"channels, weight expects {ci}"
        )
    if b.shape != (co,):
        raise ValueError(f"transposed_conv2d bias must have shape ({co},), got {b.shape}")
    if stride < 1:
        raise ValueError(f"transposed_conv2d stride must be >= 1, got {stride}")
    y = kernels.tconv2d_forward(x, w, stride)
    y += b[None, :, None, None]
    cache = (x, w, stride)
    return y, cache


def transposed_conv2d_backward(
    gy: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w, stride = cache
    dx = kernels.tconv2d_input_grad(gy, w, stride)
    dw = kernels.tconv2d_weight_grad(x, gy, stride, w.shape[2], w.shape[3])
    db = gy.sum(axis=(0, 2, 3))
    return dx, dw, db


# --------------------------------------------------------------- pooling


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """2x2 max pooling with stride 2.  Ties pick the lowest flat index."""
    _require_nchw("maxpool2x2 input", x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    y, idx = kernels.maxpool2x2_forward(x)
    cache = (idx, x.shape[2], x.shape[3])
    return y, cache


def maxpool2x2_backward(gy: np.ndarray, cache: tuple) -> np.ndarray:
    idx, in_h, in_w = cache
    return kernels.maxpool2x2_backward(gy, idx, in_h, in_w)


def nearest_upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling (each cell becomes a 2x2 block)."""
    _require_nchw("nearest_upsample2x input", x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def nearest_upsample2x_backward(gy: np.ndarray) -> np.ndarray:
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ------------------------------------------------------------ pointwise


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(gy: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is 0: the mask is strict.
    return gy * (x > 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum used for addition skip connections."""
    if a.shape != b.shape:
        raise ValueError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    return a + b


def add_backward(gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return gy, gy


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel concatenation used for concatenation skip connections."""
    _require_nchw("concat_channels first input", a)
    _require_nchw("concat_channels second input", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels requires matching batch and spatial dims, "
            f"got {a.shape} and {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(
    gy: np.ndarray, channels_a: int
) -> tuple[np.ndarray, np.ndarray]:
    return gy[:, :channels_a], gy[:, channels_a:]


# ------------------------------------------------------------ batchnorm


def batchnorm2d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[np.ndarray, tuple, np.ndarray, np.ndarray]:
    """Per-channel normalisation over the batch and both spatial axes.

    Training mode normalises by batch statistics (biased variance) and
    returns exponentially updated running statistics; eval mode
    normalises by the running statistics unchanged.  The caller decides
    whether to commit the returned running stats, so a forward pass used
    purely for gradient probing has no side effects.
    """
    _require_nchw("batchnorm2d input", x)
    c = x.shape[1]
    for name, arr in (
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ):
        if arr.shape != (c,):
            raise ValueError(f"batchnorm2d {name} must have shape ({c},), got {arr.shape}")
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ValueError(
                "batchnorm2d in training mode needs at least 2 values per "
                f"channel to estimate variance, got input shape {x.shape}"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * istd[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, istd, gamma, train)
    return y, cache, new_mean, new_var


def batchnorm2d_backward(
    gy: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, istd, gamma, train = cache
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    dbeta = gy.sum(axis=(0, 2, 3))
    if not train:
        dx = gy * (gamma * istd)[None, :, None, None]
        return dx, dgamma, dbeta
    n, _, h, w = gy.shape
    count = n * h * w
    dxhat = gy * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (istd[None, :, None, None] / count) * (
        count * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ------------------------------------------------------ softmax and loss


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis, stabilised by max subtraction."""
    _require_nchw("softmax_channels input", x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(gy: np.ndarray, probs: np.ndarray) -> np.ndarray:
    inner = (gy * probs).sum(axis=1, keepdims=True)
    return probs * (gy - inner)


def _validate_onehot(probs: np.ndarray, onehot: np.ndarray) -> None:
    if onehot.shape != probs.shape:
        raise ValueError(
            f"one-hot target shape {onehot.shape} must match "
            f"probability shape {probs.shape}"
        )
    vals = np.unique(onehot)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ValueError("one-hot target may only contain 0 and 1")
    sums = onehot.sum(axis=1)
    if not (sums == 1.0).all():
        raise ValueError("one-hot target must have exactly one 1 per pixel")


def categorical_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over all pixels of the negative log probability at the target.

    Probabilities are clamped at 1e-12 before the log, so the loss is
    finite even for a saturated wrong prediction.
    """
    _validate_onehot(probs, onehot)
    n, _, h, w = probs.shape
    npix = n * h * w
    picked = (probs * onehot).sum(axis=1)
    return float(-np.log(np.maximum(picked, CCE_CLAMP)).sum() / npix)


def categorical_cross_entropy_backward(
    probs: np.ndarray, onehot: np.ndarray
) -> np.ndarray:
    """Gradient of the loss with respect to the probabilities.

    Pixels whose target probability sits below the clamp contribute a
    locally constant loss, so their gradient is 0.  Chaining this through
    ``softmax_channels_backward`` reproduces ``(probs - onehot) / npix``
    exactly whenever no clamping is active.
    """
    _validate_onehot(probs, onehot)
    n, _, h, w = probs.shape
    npix = n * h * w
    return np.where(
        (onehot > 0) & (probs > CCE_CLAMP), -1.0 / (np.maximum(probs, CCE_CLAMP) * npix), 0.0
    )
