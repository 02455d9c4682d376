"""Test-split evaluation and the three-variant ablation driver.

Evaluation runs the trained cascade over every test volume, compares
the composed {0,1,2} label maps voxelwise against ground truth, and
emits the per-subject score table, the total-prostate-volume table,
and (with at least two subjects) the Bland-Altman agreement CSV and
figure.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .cascade import CascadeModel, segment_volume
from .config import RunConfig
from .dataset import ManifestRecord, read_manifest
from .errors import ConfigError
from .metrics import (
    STRUCTURES,
    BlandAltmanStats,
    TPVRecord,
    bland_altman,
    confusion,
    dice,
    mean_sd,
    precision,
    recall,
    structure_masks,
    total_prostate_volume,
)
from .mvol import read_mvol
from .report import (
    ScoreRow,
    comparison_columns,
    emit_svg_scatter,
    write_ba_csv,
    write_comparison_csv,
    write_scores_csv,
    write_tpv_csv,
)

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    score_rows: list[ScoreRow]
    tpv_records: list[TPVRecord]
    ba: BlandAltmanStats | None
    mean_slice_seconds: float
    skipped: list[str]

    @property
    def n_subjects(self) -> int:
        return len(self.tpv_records)


def evaluate_cascade(
    cascade: CascadeModel, records: list[ManifestRecord], out_dir
) -> EvalResult:
    """Segment each record's volume, score it, and write the report files.

    Records whose label file is missing are skipped with a warning; an
    empty or fully skipped test set is an error.  Outputs land in
    ``out_dir``: scores.csv, tpv.csv, and, given two or more subjects,
    ba.csv and agreement.svg.
    """
    if not records:
        raise ConfigError("no records to evaluate: the test split is empty")
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    score_rows: list[ScoreRow] = []
    tpv_records: list[TPVRecord] = []
    skipped: list[str] = []
    slice_means: list[float] = []
    for record in records:
        if not os.path.exists(record.label_path):
            log.warning(
                "subject %s: label file %s missing, skipping",
                record.subject_id,
                record.label_path,
            )
            skipped.append(record.subject_id)
            continue
        volume = read_mvol(record.volume_path)
        gt = read_mvol(record.label_path)
        if volume.data.shape != gt.data.shape:
            raise ConfigError(
                f"subject {record.subject_id!r}: volume dims {volume.data.shape} "
                f"!= label dims {gt.data.shape}"
            )
        result = segment_volume(cascade, volume)
        slice_means.append(result.mean_slice_seconds)
        pred_masks = structure_masks(result.labels.data)
        gt_masks = structure_masks(gt.data)
        for name in STRUCTURES:
            c = confusion(pred_masks[name], gt_masks[name])
            score_rows.append(
                ScoreRow(
                    subject_id=record.subject_id,
                    structure=name,
                    dice=dice(c),
                    precision=precision(c),
                    recall=recall(c),
                )
            )
        gt_ml = total_prostate_volume(gt.data, gt.spacing)
        pred_ml = total_prostate_volume(result.labels.data, volume.spacing)
        tpv_records.append(
            TPVRecord(subject_id=record.subject_id, gt_ml=gt_ml, pred_ml=pred_ml)
        )
        log.info(
            "subject %s: dice %s, volumes %.2f/%.2f mL",
            record.subject_id,
            "/".join(f"{r.dice:.3f}" for r in score_rows[-3:]),
            gt_ml,
            pred_ml,
        )

    if not tpv_records:
        raise ConfigError("every test record was skipped; nothing to evaluate")

    write_scores_csv(score_rows, out_path / "scores.csv")
    write_tpv_csv(tpv_records, out_path / "tpv.csv")
    ba = None
    if len(tpv_records) >= 2:
        pairs = [(r.gt_ml, r.pred_ml) for r in tpv_records]
        ba = bland_altman(pairs)
        write_ba_csv(ba, out_path / "ba.csv")
        emit_svg_scatter(pairs, ba, out_path / "agreement.svg")
    else:
        log.warning("agreement statistics need at least 2 subjects, skipping")

    mean_seconds = sum(slice_means) / len(slice_means)
    return EvalResult(
        score_rows=score_rows,
        tpv_records=tpv_records,
        ba=ba,
        mean_slice_seconds=mean_seconds,
        skipped=skipped,
    )


def summary_row(variant_name: str, score_rows: list[ScoreRow]) -> dict:
    """One comparison-table row: per-structure mean and sd of each metric."""
    shorts = {"prostate": "prostate", "central_gland": "cg", "peripheral_zone": "pz"}
    row: dict = {"variant": variant_name}
    for structure in STRUCTURES:
        rows = [r for r in score_rows if r.structure == structure]
        for metric in ("dice", "precision", "recall"):
            values = [getattr(r, metric) for r in rows]
            mean, sd = mean_sd(values)
            row[f"{metric}_{shorts[structure]}"] = mean
            row[f"sd_{metric}_{shorts[structure]}"] = sd
    missing = [c for c in comparison_columns() if c not in row]
    if missing:
        raise ConfigError(f"comparison row is missing columns: {missing}")
    return row


def run_ablation(config: RunConfig, out_dir) -> list[dict]:
    """Train and evaluate all three variants on one split and seed.

    Each variant gets its own run directory under ``out_dir``; every run
    shares the manifest (hence the subject split) and the master seed,
    so the only difference between rows is the architecture and its
    stage-2 conditioning.  Writes comparison.csv and returns its rows.
    """
    from .train import train_cascade

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    records = read_manifest(config.manifest)
    test_records = [r for r in records if r.split == "test"]
    rows = []
    for name in ("mres-multi", "mres-single", "unet-baseline"):
        run_dir = out_path / f"run-{name}"
        run_config = replace(config, variant=name, out=str(run_dir)).validate()
        log.info("ablation: training variant %s", name)
        result = train_cascade(run_config, run_dir)
        eval_result = evaluate_cascade(
            result.cascade, test_records, run_dir / "eval"
        )
        rows.append(summary_row(name, eval_result.score_rows))
    write_comparison_csv(rows, out_path / "comparison.csv")
    return rows
