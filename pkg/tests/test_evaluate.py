"""Test-split evaluation outputs and the three-variant ablation driver."""

import csv
import logging
from dataclasses import replace

import numpy as np
import pytest

from zoneseg.config import RunConfig
from zoneseg.dataset import read_manifest
from zoneseg.errors import ConfigError
from zoneseg.evaluate import evaluate_cascade, run_ablation, summary_row
from zoneseg.metrics import STRUCTURES
from zoneseg.mvol import Volume, read_mvol, write_mvol
from zoneseg.phantom import generate_dataset
from zoneseg.report import ScoreRow, comparison_columns
from zoneseg.train import train_cascade


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    generate_dataset(root, count=6, seed=7, dims=(8, 8, 4), split_counts=(3, 1, 2))
    return root


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = RunConfig(
        seed=11,
        depth=1,
        base_channels=2,
        learning_rate=0.01,
        batch_size=4,
        epochs=1,
        max_translation_px=2,
        manifest=str(data_dir / "manifest.tsv"),
        out=str(out / "run"),
    )
    return train_cascade(config)


@pytest.fixture(scope="module")
def test_records(data_dir):
    records = [r for r in read_manifest(data_dir / "manifest.tsv") if r.split == "test"]
    assert len(records) == 2
    return records


class TestEvaluateCascade:
    def test_report_files_for_two_subjects(self, trained, test_records, tmp_path):
        result = evaluate_cascade(trained.cascade, test_records, tmp_path)
        assert result.n_subjects == 2
        assert result.ba is not None
        assert result.skipped == []
        assert result.mean_slice_seconds > 0
        for name in ("scores.csv", "tpv.csv", "ba.csv", "agreement.svg"):
            assert (tmp_path / name).exists(), name
        # One row per subject per structure, subjects in manifest order.
        assert len(result.score_rows) == 2 * 3
        assert [r.structure for r in result.score_rows[:3]] == list(STRUCTURES)
        assert result.score_rows[0].subject_id == test_records[0].subject_id

    def test_scores_csv_matches_result(self, trained, test_records, tmp_path):
        result = evaluate_cascade(trained.cascade, test_records, tmp_path)
        with open(tmp_path / "scores.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(result.score_rows)
        for got, want in zip(rows, result.score_rows):
            assert got["subject_id"] == want.subject_id
            assert got["structure"] == want.structure
            assert float(got["dice"]) == want.dice

    def test_single_subject_has_no_agreement_outputs(
        self, trained, test_records, tmp_path
    ):
        result = evaluate_cascade(trained.cascade, test_records[:1], tmp_path)
        assert result.ba is None
        assert result.n_subjects == 1
        assert (tmp_path / "scores.csv").exists()
        assert (tmp_path / "tpv.csv").exists()
        assert not (tmp_path / "ba.csv").exists()
        assert not (tmp_path / "agreement.svg").exists()

    def test_missing_label_is_skipped(self, trained, test_records, tmp_path, caplog):
        broken = replace(test_records[0], label_path=str(tmp_path / "gone.mvol"))
        with caplog.at_level(logging.WARNING, logger="zoneseg.evaluate"):
            result = evaluate_cascade(
                trained.cascade, [broken, test_records[1]], tmp_path
            )
        assert result.skipped == [broken.subject_id]
        assert result.n_subjects == 1
        assert any("skipping" in r.message for r in caplog.records)

    def test_empty_records_rejected(self, trained, tmp_path):
        with pytest.raises(ConfigError, match="test split is empty"):
            evaluate_cascade(trained.cascade, [], tmp_path)

    def test_all_skipped_rejected(self, trained, test_records, tmp_path):
        broken = [
            replace(r, label_path=str(tmp_path / f"gone{i}.mvol"))
            for i, r in enumerate(test_records)
        ]
        with pytest.raises(ConfigError, match="every test record was skipped"):
            evaluate_cascade(trained.cascade, broken, tmp_path)

    def test_dim_mismatch_rejected(self, trained, test_records, tmp_path):
        gt = read_mvol(test_records[0].label_path)
        small = Volume(gt.data[:, :, :2], gt.spacing)
        write_mvol(small, tmp_path / "short.mvol")
        broken = replace(test_records[0], label_path=str(tmp_path / "short.mvol"))
        with pytest.raises(ConfigError, match="volume dims.*!= label dims"):
            evaluate_cascade(trained.cascade, [broken], tmp_path)


class TestSummaryRow:
    def test_matches_comparison_columns(self):
        rng = np.random.default_rng(4)
        rows = [
            ScoreRow(f"s{i}", structure, *rng.uniform(0.5, 1.0, size=3))
            for i in range(3)
            for structure in STRUCTURES
        ]
        row = summary_row("mres-multi", rows)
        # Key order is free; write_comparison_csv fixes the column order.
        assert set(row) == set(comparison_columns())
        assert row["variant"] == "mres-multi"

    def test_mean_and_sd_values(self):
        rows = [
            ScoreRow("a", "prostate", 0.8, 0.7, 0.6),
            ScoreRow("b", "prostate", 0.9, 0.7, 0.8),
        ] + [
            ScoreRow(s, structure, 0.5, 0.5, 0.5)
            for s in ("a", "b")
            for structure in ("central_gland", "peripheral_zone")
        ]
        row = summary_row("x", rows)
        assert row["dice_prostate"] == pytest.approx(0.85)
        assert row["sd_dice_prostate"] == pytest.approx(np.std([0.8, 0.9], ddof=1))
        assert row["precision_prostate"] == pytest.approx(0.7)
        assert row["sd_precision_prostate"] == 0.0
        assert row["dice_cg"] == 0.5
        assert row["recall_pz"] == 0.5


class TestRunAblation:
    def test_three_variants_share_split_and_seed(self, data_dir, tmp_path):
        config = RunConfig(
            seed=21,
            depth=1,
            base_channels=2,
            learning_rate=0.01,
            batch_size=4,
            epochs=1,
            max_translation_px=2,
            manifest=str(data_dir / "manifest.tsv"),
        )
        rows = run_ablation(config, tmp_path)
        assert [r["variant"] for r in rows] == [
            "mres-multi",
            "mres-single",
            "unet-baseline",
        ]
        score_columns = comparison_columns()[1:]
        for row in rows:
            for column in score_columns:
                assert np.isfinite(row[column]), column

        for name in ("mres-multi", "mres-single", "unet-baseline"):
            run_dir = tmp_path / f"run-{name}"
            assert (run_dir / "stage1.mrwt").exists()
            assert (run_dir / "stage2.mrwt").exists()
            assert (run_dir / "eval" / "scores.csv").exists()
            assert (run_dir / "eval" / "tpv.csv").exists()
            assert (run_dir / "eval" / "ba.csv").exists()

        # Same manifest and master seed everywhere: the per-run configs
        # differ only in the variant name and output path.
        texts = {
            name: dict(
                line.split(" = ", 1)
                for line in (tmp_path / f"run-{name}" / "run.cfg")
                .read_text()
                .splitlines()
                if " = " in line
            )
            for name in ("mres-multi", "mres-single", "unet-baseline")
        }
        base = texts["mres-multi"]
        for other in ("mres-single", "unet-baseline"):
            diff = {k for k in base if texts[other].get(k) != base[k]}
            assert diff == {"variant", "out"}

        with open(tmp_path / "comparison.csv", newline="") as f:
            table = list(csv.reader(f))
        assert table[0] == comparison_columns()
        assert len(table) == 4
