"""Slice preprocessing and paired image/label augmentation.

Preprocessing follows the 2D pipeline: volumes are cut into axial
slices, each slice is center-cropped when larger than the target and
z-normalized on its own statistics.  Augmentation applies the same
geometric transform to image and label, interpolating the image
bilinearly and the labels by nearest neighbour so the label set is
preserved.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

ZNORM_MIN_STD = 1e-8


def znormalize(img: np.ndarray) -> np.ndarray:
    """Zero-mean unit-std normalisation of one 2D slice.

    A slice with std below 1e-8 carries no signal; it becomes all zeros
    and is flagged in the log rather than raising.
    """
    if img.ndim != 2:
        raise ValueError(f"znormalize expects a 2D slice, got shape {img.shape}")
    std = float(img.std())
    if std < ZNORM_MIN_STD:
        log.warning("znormalize: slice std %.3e below %.0e, emitting zeros", std, ZNORM_MIN_STD)
        return np.zeros_like(img, dtype=np.float64)
    return (img - img.mean()) / std


def center_crop(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Centered ``target_h x target_w`` window of a 2D slice.

    For an odd margin the extra row or column is dropped from the
    high-index side: offset = floor((size - target) / 2).
    """
    if img.ndim != 2:
        raise ValueError(f"center_crop expects a 2D slice, got shape {img.shape}")
    h, w = img.shape
    if target_h > h or target_w > w:
        raise ValueError(
            f"center_crop target ({target_h}, {target_w}) exceeds input ({h}, {w})"
        )
    oh = (h - target_h) // 2
    ow = (w - target_w) // 2
    return img[oh : oh + target_h, ow : ow + target_w]


def preprocess_slice(
    img: np.ndarray, crop_hw: tuple[int, int] | None
) -> np.ndarray:
    """Crop (only when the slice exceeds the target) then z-normalize."""
    out = np.asarray(img, dtype=np.float64)
    if crop_hw is not None:
        th = min(crop_hw[0], out.shape[0])
        tw = min(crop_hw[1], out.shape[1])
        if (th, tw) != out.shape:
            out = center_crop(out, th, tw)
    return znormalize(out)


def crop_offsets(shape: tuple[int, int], crop_hw: tuple[int, int] | None) -> tuple[int, int]:
    """Offsets of the preprocessed window inside the original slice."""
    if crop_hw is None:
        return 0, 0
    th = min(crop_hw[0], shape[0])
    tw = min(crop_hw[1], shape[1])
    return (shape[0] - th) // 2, (shape[1] - tw) // 2


# ---------------------------------------------------------- augmentation


def _rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the slice center, bilinear interpolation, zero fill."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # Inverse map: rotate each output coordinate back into the source.
    dy = yy - cy
    dx = xx - cx
    sy = cos_t * dy + sin_t * dx + cy
    sx = -sin_t * dy + cos_t * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0

    def sample(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = np.zeros_like(sy)
        vals[valid] = img[yi[valid], xi[valid]]
        return vals

    out = (
        sample(y0, x0) * (1 - fy) * (1 - fx)
        + sample(y0, x0 + 1) * (1 - fy) * fx
        + sample(y0 + 1, x0) * fy * (1 - fx)
        + sample(y0 + 1, x0 + 1) * fy * fx
    )
    return out


def _rotate_labels(labels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate labels by nearest neighbour, background fill."""
    h, w = labels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    sy = np.rint(cos_t * dy + sin_t * dx + cy).astype(np.int64)
    sx = np.rint(-sin_t * dy + cos_t * dx + cx).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(labels)
    out[valid] = labels[sy[valid], sx[valid]]
    return out


def _translate(arr: np.ndarray, d0: int, d1: int, fill) -> np.ndarray:
    """Integer shift moving content at (i, j) to (i+d0, j+d1), edge fill."""
    out = np.full_like(arr, fill)
    h, w = arr.shape
    # Stops are clamped to 0 so a shift past the edge yields two empty
    # slices instead of a negative stop wrapping around.
    src_0 = slice(max(0, -d0), max(0, min(h, h - d0)))
    src_1 = slice(max(0, -d1), max(0, min(w, w - d1)))
    dst_0 = slice(max(0, d0), max(0, min(h, h + d0)))
    dst_1 = slice(max(0, d1), max(0, min(w, w + d1)))
    out[dst_0, dst_1] = arr[src_0, src_1]
    return out


class AugmentParams:
    """One concrete draw of the augmentation transform.

    Holding the draws separately from their application lets several
    arrays ride the same transform: the image, its labels, and any
    precomputed conditioning mask all see identical geometry.
    """

    __slots__ = ("flip0", "flip1", "angle_deg", "d0", "d1")

    def __init__(self, flip0: bool, flip1: bool, angle_deg: float, d0: int, d1: int):
        self.flip0 = flip0
        self.flip1 = flip1
        self.angle_deg = angle_deg
        self.d0 = d0
        self.d1 = d1


def draw_augment_params(
    rng: np.random.Generator,
    *,
    max_rotation_deg: float = 10.0,
    max_translation_px: int = 10,
    flip_horizontal: bool = True,
    flip_vertical: bool = False,
) -> AugmentParams:
    """Sample one transform: flips p=0.5, angle and shifts uniform.

    Disabled flips draw nothing, so stream positions depend only on the
    enabled set, which is fixed per run.
    """
    flip0 = bool(flip_horizontal and rng.random() < 0.5)
    flip1 = bool(flip_vertical and rng.random() < 0.5)
    angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg))
    d0 = int(rng.integers(-max_translation_px, max_translation_px + 1))
    d1 = int(rng.integers(-max_translation_px, max_translation_px + 1))
    return AugmentParams(flip0, flip1, angle, d0, d1)


def apply_augment_image(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Flip, rotate (bilinear), translate one image slice, zero fill."""
    # Slices are indexed (x, y) with x = patient left-right, so the
    # horizontal (left-right) flip reverses axis 0.
    out = np.asarray(img, dtype=np.float64)
    if params.flip0:
        out = out[::-1, :]
    if params.flip1:
        out = out[:, ::-1]
    if params.angle_deg != 0.0:
        out = _rotate_image(out, params.angle_deg)
    if params.d0 or params.d1:
        out = _translate(out, params.d0, params.d1, 0.0)
    return np.ascontiguousarray(out)


def apply_augment_labels(labels: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Same transform as the image, nearest neighbour, background fill."""
    out = labels
    if params.flip0:
        out = out[::-1, :]
    if params.flip1:
        out = out[:, ::-1]
    if params.angle_deg != 0.0:
        out = _rotate_labels(out, params.angle_deg)
    if params.d0 or params.d1:
        out = _translate(out, params.d0, params.d1, 0)
    return np.ascontiguousarray(out)


def augment(
    img: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    *,
    max_rotation_deg: float = 10.0,
    max_translation_px: int = 10,
    flip_horizontal: bool = True,
    flip_vertical: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Randomly flip, rotate, then translate a paired image/label slice.

    The same geometric transform hits both arrays; the image is sampled
    bilinearly and labels nearest-neighbour, with zero / background fill
    outside the frame.  Flips fire with probability 0.5, rotation angle
    is uniform in (-max_rotation_deg, +max_rotation_deg), translations
    are integer-uniform in [-max_translation_px, +max_translation_px]
    per axis.  Dims never change and the label set is preserved.
    """
    if img.shape != labels.shape:
        raise ValueError(
            f"augment needs matching shapes, got image {img.shape} and "
            f"labels {labels.shape}"
        )
    params = draw_augment_params(
        rng,
        max_rotation_deg=max_rotation_deg,
        max_translation_px=max_translation_px,
        flip_horizontal=flip_horizontal,
        flip_vertical=flip_vertical,
    )
    return apply_augment_image(img, params), apply_augment_labels(labels, params)
