"""Segmentation and agreement metrics.

Overlap metrics are computed from voxelwise confusion counts.
Degenerate denominators follow one fixed convention: when both masks are
empty the structure is in perfect agreement (dice = precision =
recall = 1); an empty prediction against a non-empty truth (or the
reverse) scores 0.  This keeps per-volume aggregation well-defined and
preserves the duality precision(pred, gt) == recall(gt, pred).

Volume agreement uses Bland-Altman statistics over paired volume
estimates, with the coefficient of variation and reproducibility
coefficient expressed relative to the grand mean of all 2n measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ZeroVarianceError

STRUCTURES = ("prostate", "central_gland", "peripheral_zone")


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxelwise counts for one structure over one volume."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ValueError(
            f"confusion requires equal dims, got {pred.shape} and {gt.shape}"
        )
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def structure_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    """Binary masks for the three structures of a {0,1,2} label volume."""
    return {
        "prostate": labels > 0,
        "central_gland": labels == 1,
        "peripheral_zone": labels == 2,
    }


def total_prostate_volume(labels_or_mask: np.ndarray, spacing) -> float:
    """Volume in mL of all non-background voxels.

    Accepts a {0,1,2} label volume or a binary mask; anything non-zero
    counts.  spacing is (sx, sy, sz) in mm.
    """
    sx, sy, sz = spacing
    count = int(np.count_nonzero(labels_or_mask))
    return count * (sx * sy * sz) / 1000.0


def percent_volume_diff(gt_ml: float, pred_ml: float) -> float:
    """|pred - gt| / gt * 100; defined as 0 when both volumes are 0."""
    if gt_ml == 0.0:
        return 0.0 if pred_ml == 0.0 else math.inf
    return abs(pred_ml - gt_ml) / gt_ml * 100.0


@dataclass(frozen=True)
class TPVRecord:
    subject_id: str
    gt_ml: float
    pred_ml: float

    @property
    def percent_diff(self) -> float:
        return percent_volume_diff(self.gt_ml, self.pred_ml)


def pearson_correlation(pairs) -> float:
    """Sample Pearson r of paired values.

    Raises on fewer than 2 pairs and, distinctly, on zero variance in
    either sequence (the statistic is undefined there; ``bland_altman``
    layers an identical-sequence convention on top).
    """
    a = np.asarray([p[0] for p in pairs], dtype=np.float64)
    b = np.asarray([p[1] for p in pairs], dtype=np.float64)
    if len(a) < 2:
        raise ValueError(f"pearson_correlation needs at least 2 pairs, got {len(a)}")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ZeroVarianceError(
            "pearson_correlation is undefined for a zero-variance sequence"
        )
    return float((da @ db) / math.sqrt(va * vb))


@dataclass(frozen=True)
class BlandAltmanStats:
    """Agreement statistics over paired (gt_ml, pred_ml) estimates.

    Differences are pred - gt.  ``rpc = 1.96 * sd_diff`` (sample sd);
    ``rpc_pct`` and ``cv_pct`` (= sd_diff over grand mean, in percent)
    are relative to the grand mean of all 2n measurements.
    ``outside_indices`` flags pairs whose difference falls outside the
    limits of agreement.
    """

    n: int
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    rpc: float
    rpc_pct: float
    cv_pct: float
    pearson_r: float
    outside_indices: tuple[int, ...]


def bland_altman(pairs) -> BlandAltmanStats:
    """Bland-Altman statistics per the BlandAltmanStats definition.

    Identical gt and pred sequences have an undefined Pearson r; they
    report 1.0 by convention (perfect agreement).  A constant but
    non-identical sequence reports NaN.  A grand mean of exactly 0 makes
    the percent figures 0 by convention.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n < 2:
        raise ValueError(f"bland_altman needs at least 2 pairs, got {n}")
    gt = np.asarray([p[0] for p in pairs], dtype=np.float64)
    pred = np.asarray([p[1] for p in pairs], dtype=np.float64)
    diffs = pred - gt
    mean_diff = float(diffs.mean())
    sd_diff = float(diffs.std(ddof=1))
    loa_low = mean_diff - 1.96 * sd_diff
    loa_high = mean_diff + 1.96 * sd_diff
    rpc = 1.96 * sd_diff
    grand = float(np.concatenate([gt, pred]).mean())
    rpc_pct = 0.0 if grand == 0.0 else rpc / grand * 100.0
    cv_pct = 0.0 if grand == 0.0 else sd_diff / grand * 100.0
    if np.array_equal(gt, pred):
        r = 1.0
    else:
        try:
            r = pearson_correlation(pairs)
        except ZeroVarianceError:
            r = math.nan
    outside = tuple(
        int(i) for i in range(n) if not (loa_low <= diffs[i] <= loa_high)
    )
    return BlandAltmanStats(
        n=n,
        mean_diff=mean_diff,
        sd_diff=sd_diff,
        loa_low=loa_low,
        loa_high=loa_high,
        rpc=rpc,
        rpc_pct=rpc_pct,
        cv_pct=cv_pct,
        pearson_r=r,
        outside_indices=outside,
    )


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample sd (n-1); the sd of a single value is 0."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_sd needs at least one value")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))
