"""Synthetic prostate phantoms: ellipsoid geometry with exact labels.

Each phantom is a pair of axis-aligned ellipsoids: the prostate, and a
smaller central gland fully inside it, displaced towards anterior
(the +y axis).  The peripheral zone is the set difference.  Labels are
exact by construction; intensities mimic T2 contrast (peripheral zone
brightest), modulated by a smooth multiplicative bias field plus
Gaussian noise.

Interiority guarantee: the gland's semi-axes are the prostate's scaled
by fraction^(1/3) (so its volume fraction is ``fraction``), and the
anterior offset, expressed in prostate-normalised coordinates, is sized
within ``1 - fraction^(1/3)``.  For any gland surface point
``o + s*u`` (|u| = 1) the prostate-normalised norm is at most
``|o| + max_i(s_i/p_i) = |o| + fraction^(1/3) < 1``, so the gland stays
strictly inside.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ManifestRecord, split_dataset, write_manifest
from .errors import ConfigError
from .mvol import Volume, write_mvol
from .rng import derive_rng

_OFFSET_SAFETY = 0.85


@dataclass(frozen=True)
class PhantomSpec:
    """Randomisation ranges and imaging parameters for one phantom family.

    Semi-axis ranges are in voxel units (equal to mm at the default
    isotropic 1 mm spacing); axis order is (x, y, z).
    """

    dims: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axes_range: tuple[tuple[float, float], ...] = (
        (14.0, 22.0),
        (12.0, 20.0),
        (8.0, 13.0),
    )
    cg_fraction_range: tuple[float, float] = (0.35, 0.55)
    center_jitter: float = 2.0
    intensity_bg: float = 0.2
    intensity_cg: float = 0.5
    intensity_pz: float = 0.8
    noise_sigma: float = 0.05
    bias_amplitude: float = 0.15

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ConfigError(f"phantom dims must be 3 values >= 4, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"phantom spacing must be positive, got {self.spacing}")
        if len(self.semi_axes_range) != 3:
            raise ConfigError("semi_axes_range needs one (lo, hi) pair per axis")
        for axis, (lo, hi) in enumerate(self.semi_axes_range):
            if not (0 < lo <= hi):
                raise ConfigError(
                    f"semi_axes_range axis {axis} must satisfy 0 < lo <= hi, "
                    f"got ({lo}, {hi})"
                )
        flo, fhi = self.cg_fraction_range
        if not (0.0 < flo <= fhi < 1.0):
            raise ConfigError(
                f"cg_fraction_range must satisfy 0 < lo <= hi < 1, "
                f"got {self.cg_fraction_range}"
            )
        if self.center_jitter < 0:
            raise ConfigError(f"center_jitter must be >= 0, got {self.center_jitter}")
        if not (self.intensity_bg < self.intensity_cg < self.intensity_pz):
            raise ConfigError(
                "intensities must satisfy background < central gland < "
                f"peripheral zone, got ({self.intensity_bg}, {self.intensity_cg}, "
                f"{self.intensity_pz})"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0.0 <= self.bias_amplitude < 1.0):
            raise ConfigError(
                f"bias_amplitude must be in [0, 1), got {self.bias_amplitude}"
            )
        # The largest prostate the ranges allow must fit inside the grid
        # even at maximal center jitter.
        for axis in range(3):
            half = (self.dims[axis] - 1) / 2.0
            if self.center_jitter + self.semi_axes_range[axis][1] > half:
                raise ConfigError(
                    f"axis {axis}: jitter {self.center_jitter} + max semi-axis "
                    f"{self.semi_axes_range[axis][1]} exceeds half-extent {half}; "
                    f"enlarge dims or shrink the ranges"
                )


def _ellipsoid_mask(dims, center, semi) -> np.ndarray:
    x = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    q = (
        ((x - center[0]) / semi[0]) ** 2
        + ((y - center[1]) / semi[1]) ** 2
        + ((z - center[2]) / semi[2]) ** 2
    )
    return q <= 1.0


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Volume, Volume]:
    """Draw one phantom; identical (spec, rng state) gives identical bytes.

    Draw order is fixed: semi-axes, center jitter, gland fraction,
    anterior offset magnitude, bias-field coefficients, then the noise
    field.  Returns (intensity Volume float64, label Volume uint8) with
    labels 0 = background, 1 = central gland, 2 = peripheral zone.
    """
    dims = spec.dims
    semi = np.array([rng.uniform(lo, hi) for lo, hi in spec.semi_axes_range])
    center = np.array([(d - 1) / 2.0 for d in dims])
    center = center + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
    fraction = float(rng.uniform(*spec.cg_fraction_range))

    scale = fraction ** (1.0 / 3.0)
    cg_semi = semi * scale
    budget = 1.0 - scale
    if budget <= 0:
        raise ConfigError(
            f"central-gland fraction {fraction} leaves no room inside the prostate"
        )
    offset_norm = float(rng.uniform(0.0, _OFFSET_SAFETY)) * budget
    # Anterior is +y; the offset lives in prostate-normalised coordinates.
    if offset_norm + scale >= 1.0:
        raise ConfigError(
            f"gland offset {offset_norm:.3f} + size ratio {scale:.3f} reaches "
            f"the prostate surface"
        )
    cg_center = center + np.array([0.0, offset_norm * semi[1], 0.0])

    prostate = _ellipsoid_mask(dims, center, semi)
    cg = _ellipsoid_mask(dims, cg_center, cg_semi)
    cg &= prostate
    pz = prostate & ~cg

    labels = np.zeros(dims, dtype=np.uint8)
    labels[cg] = 1
    labels[pz] = 2

    intensity = np.full(dims, spec.intensity_bg, dtype=np.float64)
    intensity[cg] = spec.intensity_cg
    intensity[pz] = spec.intensity_pz

    if spec.bias_amplitude > 0.0:
        coeffs = rng.uniform(-1.0, 1.0, size=6)
        xn = np.linspace(-1.0, 1.0, dims[0])[:, None, None]
        yn = np.linspace(-1.0, 1.0, dims[1])[None, :, None]
        zn = np.linspace(-1.0, 1.0, dims[2])[None, None, :]
        poly = (
            coeffs[0] * xn
            + coeffs[1] * yn
            + coeffs[2] * zn
            + coeffs[3] * xn * yn
            + coeffs[4] * xn * zn
            + coeffs[5] * yn * zn
        )
        peak = float(np.abs(poly).max())
        if peak > 0.0:
            intensity *= 1.0 + spec.bias_amplitude * poly / peak
    else:
        # Consume the coefficient draws anyway so phantoms with and
        # without bias share geometry and noise for the same rng.
        rng.uniform(-1.0, 1.0, size=6)

    if spec.noise_sigma > 0.0:
        intensity += rng.normal(0.0, spec.noise_sigma, size=dims)

    return (
        Volume(data=intensity, spacing=spec.spacing),
        Volume(data=labels, spacing=spec.spacing),
    )


def default_spec_for_dims(
    dims: tuple[int, int, int], spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> PhantomSpec:
    """Default ranges scaled per axis from the 64x64x32 reference grid.

    Anatomy keeps its proportions on any grid size.  Sizes scale by the
    half-extent ratio (d - 1) / (base_d - 1), the same quantity the fit
    check compares against, so any dims that pass the >= 4 floor yield a
    valid spec; the center jitter scales by the tightest axis.
    """
    base = PhantomSpec()
    scale = [(dims[i] - 1) / (base.dims[i] - 1) for i in range(3)]
    ranges = tuple(
        (lo * scale[i], hi * scale[i])
        for i, (lo, hi) in enumerate(base.semi_axes_range)
    )
    return PhantomSpec(
        dims=tuple(dims),
        spacing=spacing,
        semi_axes_range=ranges,
        center_jitter=base.center_jitter * min(scale),
    )


def generate_dataset(
    out_dir,
    count: int,
    seed: int,
    dims: tuple[int, int, int] = (64, 64, 32),
    split_counts: tuple[int, int, int] | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Path:
    """Write ``count`` phantom volume/label pairs plus a split manifest.

    Each phantom draws from its own stream keyed by subject id, so any
    subset regenerates identically.  Subjects are assigned to splits by
    a seeded shuffle; the default split is roughly 70/15/15.  Returns
    the manifest path.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    spec = default_spec_for_dims(dims, spacing)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        subject = f"case{i:03d}"
        rng = derive_rng(seed, "phantom", subject)
        image, labels = generate_phantom(spec, rng)
        vol_name = f"{subject}.mvol"
        lab_name = f"{subject}_labels.mvol"
        write_mvol(image, out_path / vol_name)
        write_mvol(labels, out_path / lab_name)
        records.append(ManifestRecord(subject, vol_name, lab_name, "train"))
    if split_counts is None:
        train_n = round(0.7 * count)
        val_n = round(0.15 * count)
        split_counts = (train_n, val_n, count - train_n - val_n)
    records = split_dataset(records, *split_counts, seed=seed)
    manifest = out_path / "manifest.tsv"
    write_manifest(records, manifest)
    return manifest
