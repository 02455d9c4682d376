"""CSV and SVG emission for evaluation results.

CSV files are plain comma-separated with a header row.  Floats are
written with ``repr``, the shortest digit string that round-trips to the
identical float64, so re-parsing a CSV reproduces the values exactly.

The agreement figure is a standalone SVG 1.1 document on a fixed
800x400 canvas with two panels: a correlation plot (square markers plus
the identity line) and a Bland-Altman plot (one circle per pair plus
three horizontal reference lines: mean difference and both limits of
agreement, annotated with CV and RPC).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .metrics import STRUCTURES, BlandAltmanStats, TPVRecord


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


@dataclass(frozen=True)
class ScoreRow:
    subject_id: str
    structure: str
    dice: float
    precision: float
    recall: float


def write_scores_csv(rows: list[ScoreRow], path) -> None:
    _write_rows(
        path,
        ["subject_id", "structure", "dice", "precision", "recall"],
        ((r.subject_id, r.structure, r.dice, r.precision, r.recall) for r in rows),
    )


def write_tpv_csv(records: list[TPVRecord], path) -> None:
    _write_rows(
        path,
        ["subject_id", "gt_ml", "pred_ml", "percent_diff"],
        ((r.subject_id, r.gt_ml, r.pred_ml, r.percent_diff) for r in records),
    )


def read_tpv_csv(path) -> list[TPVRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        expected = ["subject_id", "gt_ml", "pred_ml", "percent_diff"]
        if header != expected:
            raise ValueError(f"{path}: tpv CSV header {header}, expected {expected}")
        return [
            TPVRecord(subject_id=row[0], gt_ml=float(row[1]), pred_ml=float(row[2]))
            for row in reader
        ]


def write_ba_csv(stats: BlandAltmanStats, path) -> None:
    _write_rows(
        path,
        [
            "n",
            "mean_diff",
            "sd_diff",
            "loa_low",
            "loa_high",
            "rpc",
            "rpc_pct",
            "cv_pct",
            "pearson_r",
        ],
        [
            (
                stats.n,
                stats.mean_diff,
                stats.sd_diff,
                stats.loa_low,
                stats.loa_high,
                stats.rpc,
                stats.rpc_pct,
                stats.cv_pct,
                stats.pearson_r,
            )
        ],
    )


@dataclass(frozen=True)
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice_prostate: float
    val_dice_cg: float
    val_dice_pz: float
    seconds: float


def write_trainlog_csv(entries: list[TrainLogEntry], path) -> None:
    _write_rows(
        path,
        [
            "epoch",
            "train_loss",
            "val_loss",
            "val_dice_prostate",
            "val_dice_cg",
            "val_dice_pz",
            "seconds",
        ],
        (
            (
                e.epoch,
                e.train_loss,
                e.val_loss,
                e.val_dice_prostate,
                e.val_dice_cg,
                e.val_dice_pz,
                e.seconds,
            )
            for e in entries
        ),
    )


_METRIC_NAMES = ("dice", "precision", "recall")
_STRUCT_SHORT = {"prostate": "prostate", "central_gland": "cg", "peripheral_zone": "pz"}


def comparison_columns() -> list[str]:
    """Column names of the variant comparison CSV (means then sds)."""
    cols = ["variant"]
    for metric in _METRIC_NAMES:
        for structure in STRUCTURES:
            cols.append(f"{metric}_{_STRUCT_SHORT[structure]}")
    for metric in _METRIC_NAMES:
        for structure in STRUCTURES:
            cols.append(f"sd_{metric}_{_STRUCT_SHORT[structure]}")
    return cols


def write_comparison_csv(rows: list[dict], path) -> None:
    """One row per variant; ``rows`` map column name to value."""
    cols = comparison_columns()
    _write_rows(path, cols, ([row[c] for c in cols] for row in rows))


# ------------------------------------------------------------------- SVG

_CANVAS_W = 800
_CANVAS_H = 400
_PANEL_BOXES = ((60, 40, 360, 340), (460, 40, 760, 340))


def _scale(values, lo_px, hi_px, pad_frac=0.08):
    vmin = min(values)
    vmax = max(values)
    span = vmax - vmin
    if span == 0.0:
        span = max(abs(vmin), 1.0)
        vmin -= span / 2
        vmax += span / 2
    else:
        vmin -= span * pad_frac
        vmax += span * pad_frac

    def to_px(v):
        return lo_px + (v - vmin) / (vmax - vmin) * (hi_px - lo_px)

    return to_px, vmin, vmax


def emit_svg_scatter(pairs, stats: BlandAltmanStats, path) -> None:
    """Write the correlation + Bland-Altman figure for paired volumes."""
    pairs = list(pairs)
    gt = [p[0] for p in pairs]
    pred = [p[1] for p in pairs]
    means = [(g + p) / 2.0 for g, p in pairs]
    diffs = [p - g for g, p in pairs]

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_CANVAS_W}" height="{_CANVAS_H}" '
        f'viewBox="0 0 {_CANVAS_W} {_CANVAS_H}">',
        f'<rect x="0" y="0" width="{_CANVAS_W}" height="{_CANVAS_H}" fill="white"/>',
    ]

    # Left panel: correlation plot with identity line and square markers.
    x0, y0, x1, y1 = _PANEL_BOXES[0]
    both = gt + pred
    sx, lo, hi = _scale(both, x0, x1)
    sy, _, _ = _scale(both, y1, y0)
    parts.append(
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
        f'fill="none" stroke="black"/>'
    )
    parts.append(
        f'<line class="identity" x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" '
        f'x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" stroke="gray" stroke-dasharray="4 3"/>'
    )
    for g, p in pairs:
        parts.append(
            f'<rect class="point" x="{sx(g) - 3:.2f}" y="{sy(p) - 3:.2f}" '
            f'width="6" height="6" fill="steelblue"/>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2}" y="{y1 + 30}" text-anchor="middle" '
        f'font-size="13">reference volume (mL)</text>'
    )
    parts.append(
        f'<text x="{x0 - 40}" y="{(y0 + y1) / 2}" text-anchor="middle" '
        f'font-size="13" transform="rotate(-90 {x0 - 40} {(y0 + y1) / 2})">'
        f'predicted volume (mL)</text>'
    )
    parts.append(
        f'<text x="{x0 + 8}" y="{y0 + 18}" font-size="13">'
        f"r = {stats.pearson_r:.4f}</text>"
    )

    # Right panel: Bland-Altman with circle markers and reference lines.
    x0, y0, x1, y1 = _PANEL_BOXES[1]
    bx, _, _ = _scale(means, x0, x1)
    dvals = diffs + [stats.loa_low, stats.loa_high, stats.mean_diff]
    by, _, _ = _scale(dvals, y1, y0)
    parts.append(
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
        f'fill="none" stroke="black"/>'
    )
    for label, value in (
        ("mean", stats.mean_diff),
        ("loa_low", stats.loa_low),
        ("loa_high", stats.loa_high),
    ):
        py = by(value)
        dash = "" if label == "mean" else ' stroke-dasharray="5 4"'
        parts.append(
            f'<line class="reference" data-ref="{label}" x1="{x0}" y1="{py:.2f}" '
            f'x2="{x1}" y2="{py:.2f}" stroke="crimson"{dash}/>'
        )
    for m, d in zip(means, diffs):
        parts.append(
            f'<circle class="point" cx="{bx(m):.2f}" cy="{by(d):.2f}" r="4" '
            f'fill="seagreen"/>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2}" y="{y1 + 30}" text-anchor="middle" '
        f'font-size="13">mean of pair (mL)</text>'
    )
    parts.append(
        f'<text x="{x0 - 40}" y="{(y0 + y1) / 2}" text-anchor="middle" '
        f'font-size="13" transform="rotate(-90 {x0 - 40} {(y0 + y1) / 2})">'
        f'difference pred - ref (mL)</text>'
    )
    parts.append(
        f'<text x="{x0 + 8}" y="{y0 + 18}" font-size="13">'
        f"CV = {stats.cv_pct:.2f}%</text>"
    )
    parts.append(
        f'<text x="{x0 + 8}" y="{y0 + 36}" font-size="13">'
        f"RPC = {stats.rpc:.4f} mL ({stats.rpc_pct:.2f}%)</text>"
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts))
