"""Two-stage cascade: prostate mask, conditioned gland, zone by exclusion.

Stage 1 segments the whole prostate on each axial slice.  Stage 2 sees
the slice conditioned on that mask and segments the central gland.  The
peripheral zone is never predicted directly: it is the prostate minus
the gland.  Final labels are {0 background, 1 central gland, 2
peripheral zone}, and the gland is clipped to the prostate mask so the
three structures always partition the stage-1 prediction.

Three experimental variants share this machinery:

- ``mres-multi``: residual nets; stage 2 input is (image, mask) stacked
  as two channels
- ``mres-single``: residual nets; stage 2 input is image * mask
- ``unet-baseline``: plain concatenation-skip UNets; stage 2 input is
  image * mask
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import NetConfig, SegNet
from .mvol import Volume
from .preprocess import crop_offsets, preprocess_slice


@dataclass(frozen=True)
class CascadeVariant:
    """One experimental arm: architecture plus stage-2 conditioning."""

    name: str
    arch: str  # "mres" | "unet"
    conditioning: str  # "multichannel" | "singlechannel"

    @property
    def stage2_in_channels(self) -> int:
        return 2 if self.conditioning == "multichannel" else 1

    @property
    def skip_mode(self) -> str:
        return "addition" if self.arch == "mres" else "concatenation"


VARIANTS = {
    "mres-multi": CascadeVariant("mres-multi", "mres", "multichannel"),
    "mres-single": CascadeVariant("mres-single", "mres", "singlechannel"),
    "unet-baseline": CascadeVariant("unet-baseline", "unet", "singlechannel"),
}


def get_variant(name: str) -> CascadeVariant:
    if name not in VARIANTS:
        raise ConfigError(
            f"unknown variant {name!r}, choose from {sorted(VARIANTS)}"
        )
    return VARIANTS[name]


def stage_configs(
    variant: CascadeVariant, depth: int, base_channels: int, use_norm: bool = True,
    upsample: str = "tconv",
) -> tuple[NetConfig, NetConfig]:
    """NetConfigs for the two stages of a variant."""
    stage1 = NetConfig(
        in_channels=1,
        num_classes=2,
        depth=depth,
        base_channels=base_channels,
        skip_mode=variant.skip_mode,
        use_norm=use_norm,
        upsample=upsample,
    )
    stage2 = NetConfig(
        in_channels=variant.stage2_in_channels,
        num_classes=2,
        depth=depth,
        base_channels=base_channels,
        skip_mode=variant.skip_mode,
        use_norm=use_norm,
        upsample=upsample,
    )
    return stage1, stage2


# ------------------------------------------------------------ mask algebra


def make_stage2_input(
    image: np.ndarray, prostate_mask: np.ndarray, variant: CascadeVariant
) -> np.ndarray:
    """Stage-2 input (c, h, w) from a slice and its prostate mask.

    The mask enters as real values {0.0, 1.0}: multichannel variants
    stack it as a second channel, single-channel variants multiply it
    into the image.
    """
    if image.shape != prostate_mask.shape:
        raise ValueError(
            f"mask dims {prostate_mask.shape} must equal slice dims {image.shape}"
        )
    mask_real = prostate_mask.astype(np.float64)
    if variant.conditioning == "multichannel":
        return np.stack([image, mask_real])
    return (image * mask_real)[None, :, :]


def derive_peripheral_zone(prostate: np.ndarray, central_gland: np.ndarray) -> np.ndarray:
    """PZ = prostate AND NOT central gland."""
    if prostate.shape != central_gland.shape:
        raise ValueError(
            f"derive_peripheral_zone dims differ: {prostate.shape} vs "
            f"{central_gland.shape}"
        )
    return prostate.astype(bool) & ~central_gland.astype(bool)


def compose_labels(prostate: np.ndarray, central_gland: np.ndarray) -> np.ndarray:
    """Label map {0,1,2} from the two masks; the gland is clipped to the
    prostate so labels {1,2} exactly cover the stage-1 mask."""
    pro = prostate.astype(bool)
    cg = central_gland.astype(bool) & pro
    pz = pro & ~cg
    labels = np.zeros(prostate.shape, dtype=np.uint8)
    labels[cg] = 1
    labels[pz] = 2
    return labels


def postprocess_largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 6-connected component of a 3D mask.

    Empty masks come back unchanged.  Size ties keep the component
    found first in scan order (deterministic).
    """
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    fg = mask.astype(bool)
    if not fg.any():
        return fg
    remaining = fg.copy()
    best = None
    best_count = 0
    while remaining.any():
        seed = np.unravel_index(int(np.argmax(remaining)), remaining.shape)
        comp = _flood_fill_6(remaining, seed)
        count = int(comp.sum())
        if count > best_count:
            best, best_count = comp, count
        remaining &= ~comp
    return best


def _flood_fill_6(mask: np.ndarray, seed: tuple[int, int, int]) -> np.ndarray:
    """Component of ``mask`` containing ``seed`` via frontier dilation."""
    comp = np.zeros_like(mask)
    comp[seed] = True
    frontier = comp.copy()
    while frontier.any():
        grown = np.zeros_like(mask)
        grown[1:, :, :] |= frontier[:-1, :, :]
        grown[:-1, :, :] |= frontier[1:, :, :]
        grown[:, 1:, :] |= frontier[:, :-1, :]
        grown[:, :-1, :] |= frontier[:, 1:, :]
        grown[:, :, 1:] |= frontier[:, :, :-1]
        grown[:, :, :-1] |= frontier[:, :, 1:]
        grown &= mask
        grown &= ~comp
        comp |= grown
        frontier = grown
    return comp


# --------------------------------------------------------------- inference


@dataclass
class CascadeModel:
    """Both trained stages plus everything inference needs."""

    stage1: SegNet
    stage2: SegNet
    variant: CascadeVariant
    crop_hw: tuple[int, int] | None = None
    keep_largest_component: bool = False

    def __post_init__(self):
        if self.stage1.config.in_channels != 1:
            raise ConfigError(
                f"stage 1 must take 1 input channel, config says "
                f"{self.stage1.config.in_channels}"
            )
        expected = self.variant.stage2_in_channels
        if self.stage2.config.in_channels != expected:
            raise ConfigError(
                f"variant {self.variant.name!r} needs stage-2 in_channels="
                f"{expected}, config says {self.stage2.config.in_channels}"
            )


def _mask_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax over the 2-class channel axis; ties go to background."""
    return (probs[1] > probs[0]).astype(np.uint8)


def predict_prostate(model: SegNet, x: np.ndarray) -> np.ndarray:
    """Binary prostate mask for one preprocessed slice (1, 1, h, w)."""
    probs, _ = model.forward(x, train=False)
    return _mask_from_probs(probs[0])


def predict_central_gland(model: SegNet, stage2_input: np.ndarray) -> np.ndarray:
    """Binary central-gland mask from a conditioned stage-2 input."""
    probs, _ = model.forward(stage2_input[None], train=False)
    return _mask_from_probs(probs[0])


@dataclass
class SegmentationResult:
    labels: Volume
    slice_seconds: list[float]
    prostate_probs: Volume | None = None
    gland_probs: Volume | None = None

    @property
    def mean_slice_seconds(self) -> float:
        return float(np.mean(self.slice_seconds)) if self.slice_seconds else 0.0


def segment_volume(
    cascade: CascadeModel, volume: Volume, *, dump_probs: bool = False
) -> SegmentationResult:
    """Run the cascade over every axial slice of a volume.

    Slices are preprocessed exactly like training data (crop when larger
    than the configured window, z-normalize), predictions are composed
    into {0,1,2} labels on the original grid (anything outside the crop
    window stays background).  Per-slice wall-clock covers both network
    passes for that slice.  A failure in any slice aborts with the slice
    index named.
    """
    nx, ny, nz = volume.data.shape
    off0, off1 = crop_offsets((nx, ny), cascade.crop_hw)
    labels_full = np.zeros((nx, ny, nz), dtype=np.uint8)
    pro_probs = np.zeros((nx, ny, nz), dtype=np.float64) if dump_probs else None
    cg_probs = np.zeros((nx, ny, nz), dtype=np.float64) if dump_probs else None

    images = []
    pro_masks = []
    slice_seconds = []
    for k in range(nz):
        try:
            image = preprocess_slice(volume.data[:, :, k], cascade.crop_hw)
            t0 = time.perf_counter()
            probs, _ = cascade.stage1.forward(image[None, None], train=False)
            slice_seconds.append(time.perf_counter() - t0)
            pro_masks.append(_mask_from_probs(probs[0]))
            images.append(image)
            if dump_probs:
                h, w = image.shape
                pro_probs[off0 : off0 + h, off1 : off1 + w, k] = probs[0, 1]
        except Exception as exc:
            raise RuntimeError(f"stage 1 failed on slice {k}: {exc}") from exc

    pro_stack = np.stack(pro_masks, axis=2)
    if cascade.keep_largest_component:
        pro_stack = postprocess_largest_component(pro_stack).astype(np.uint8)

    for k in range(nz):
        try:
            image = images[k]
            pro_mask = pro_stack[:, :, k]
            t0 = time.perf_counter()
            s2_input = make_stage2_input(image, pro_mask, cascade.variant)
            probs, _ = cascade.stage2.forward(s2_input[None], train=False)
            slice_seconds[k] += time.perf_counter() - t0
            cg_mask = _mask_from_probs(probs[0])
            slice_labels = compose_labels(pro_mask, cg_mask)
            h, w = image.shape
            labels_full[off0 : off0 + h, off1 : off1 + w, k] = slice_labels
            if dump_probs:
                cg_probs[off0 : off0 + h, off1 : off1 + w, k] = probs[0, 1]
        except Exception as exc:
            raise RuntimeError(f"stage 2 failed on slice {k}: {exc}") from exc

    return SegmentationResult(
        labels=Volume(data=labels_full, spacing=volume.spacing),
        slice_seconds=slice_seconds,
        prostate_probs=Volume(pro_probs, volume.spacing) if dump_probs else None,
        gland_probs=Volume(cg_probs, volume.spacing) if dump_probs else None,
    )
