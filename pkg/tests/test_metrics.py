"""Overlap metrics, volume estimates, and agreement statistics."""

import math

import numpy as np
import pytest

from zoneseg.errors import ZeroVarianceError
from zoneseg.metrics import (
    BlandAltmanStats,
    ConfusionCounts,
    TPVRecord,
    bland_altman,
    confusion,
    dice,
    mean_sd,
    pearson_correlation,
    percent_volume_diff,
    precision,
    recall,
    structure_masks,
    total_prostate_volume,
)


def _brute_force(pred, gt):
    """Element-by-element confusion counting, the enumeration oracle."""
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


class TestConfusionAndOverlap:
    def test_counts_match_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            shape = tuple(rng.integers(1, 6, size=3))
            pred = rng.random(shape) > 0.5
            gt = rng.random(shape) > 0.5
            got = confusion(pred, gt)
            want = _brute_force(pred, gt)
            assert got == want
            assert got.total == int(np.prod(shape))

    def test_dice_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred = rng.random((6, 6)) > 0.4
            gt = rng.random((6, 6)) > 0.6
            c = confusion(pred, gt)
            inter = np.count_nonzero(pred & gt)
            denom = pred.sum() + gt.sum()
            if denom:
                assert dice(c) == pytest.approx(2 * inter / denom)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="equal dims"):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_both_empty_is_perfect_agreement(self):
        c = confusion(np.zeros((3, 3)), np.zeros((3, 3)))
        assert dice(c) == 1.0
        assert precision(c) == 1.0
        assert recall(c) == 1.0

    def test_empty_prediction_against_nonempty_truth(self):
        gt = np.zeros((3, 3))
        gt[1, 1] = 1
        c = confusion(np.zeros((3, 3)), gt)
        assert dice(c) == 0.0
        assert precision(c) == 0.0
        assert recall(c) == 0.0

    def test_nonempty_prediction_against_empty_truth(self):
        pred = np.zeros((3, 3))
        pred[1, 1] = 1
        c = confusion(pred, np.zeros((3, 3)))
        assert dice(c) == 0.0
        assert precision(c) == 0.0
        assert recall(c) == 0.0

    def test_precision_recall_duality(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            pred = rng.random((5, 5)) > 0.5
            gt = rng.random((5, 5)) > 0.5
            assert precision(confusion(pred, gt)) == recall(confusion(gt, pred))

    def test_hand_counted_case(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [1, 0]])
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
        assert dice(c) == pytest.approx(2 / 4)
        assert precision(c) == pytest.approx(1 / 2)
        assert recall(c) == pytest.approx(1 / 2)


class TestStructuresAndVolume:
    def test_structure_masks_partition(self):
        labels = np.array([[0, 1], [2, 1]])
        masks = structure_masks(labels)
        np.testing.assert_array_equal(masks["prostate"], [[False, True], [True, True]])
        np.testing.assert_array_equal(masks["central_gland"], [[False, True], [False, True]])
        np.testing.assert_array_equal(masks["peripheral_zone"], [[False, False], [True, False]])

    def test_volume_in_ml_uses_spacing(self):
        labels = np.zeros((10, 10, 10), dtype=np.uint8)
        labels[:5, :5, :5] = 2
        # 125 voxels of 0.5*0.5*4.0 = 1 mm^3 each -> 0.125 mL
        assert total_prostate_volume(labels, (0.5, 0.5, 4.0)) == pytest.approx(0.125)

    def test_volume_counts_any_nonzero_label(self):
        labels = np.array([[[0, 1, 2]]], dtype=np.uint8)
        assert total_prostate_volume(labels, (10.0, 10.0, 10.0)) == pytest.approx(2.0)

    def test_percent_volume_diff(self):
        assert percent_volume_diff(40.0, 44.0) == pytest.approx(10.0)
        assert percent_volume_diff(40.0, 36.0) == pytest.approx(10.0)
        assert percent_volume_diff(0.0, 0.0) == 0.0
        assert percent_volume_diff(0.0, 1.0) == math.inf

    def test_tpv_record_percent_diff_is_derived(self):
        rec = TPVRecord(subject_id="s1", gt_ml=50.0, pred_ml=45.0)
        assert rec.percent_diff == pytest.approx(10.0)


class TestPearson:
    def test_exact_linear_relation(self):
        pairs = [(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]
        assert pearson_correlation(pairs) == pytest.approx(1.0)
        anti = [(1.0, -2.0), (2.0, -4.0), (3.0, -6.0)]
        assert pearson_correlation(anti) == pytest.approx(-1.0)

    def test_matches_numpy_corrcoef(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            a = rng.standard_normal(8)
            b = rng.standard_normal(8)
            want = float(np.corrcoef(a, b)[0, 1])
            assert pearson_correlation(list(zip(a, b))) == pytest.approx(want, abs=1e-12)

    def test_too_few_pairs(self):
        with pytest.raises(ValueError, match="at least 2"):
            pearson_correlation([(1.0, 2.0)])

    def test_zero_variance_raises(self):
        with pytest.raises(ZeroVarianceError, match="zero-variance"):
            pearson_correlation([(1.0, 2.0), (1.0, 3.0)])


class TestBlandAltman:
    def test_frozen_three_pair_oracle(self):
        # diffs = [1, 2, 3]: mean 2, sample sd 1, LoA 2 -+ 1.96,
        # grand mean of (0,0,0,1,2,3) = 1, so cv = 100%, rpc_pct = 196%.
        stats = bland_altman([(0.0, 1.0), (0.0, 2.0), (0.0, 3.0)])
        assert stats.n == 3
        assert stats.mean_diff == pytest.approx(2.0)
        assert stats.sd_diff == pytest.approx(1.0)
        assert stats.loa_low == pytest.approx(0.04)
        assert stats.loa_high == pytest.approx(3.96)
        assert stats.rpc == pytest.approx(1.96)
        assert stats.rpc_pct == pytest.approx(196.0)
        assert stats.cv_pct == pytest.approx(100.0)
        assert math.isnan(stats.pearson_r)  # gt has zero variance
        assert stats.outside_indices == ()

    def test_identical_sequences_report_r_one(self):
        stats = bland_altman([(1.0, 1.0), (2.0, 2.0), (5.0, 5.0)])
        assert stats.mean_diff == 0.0
        assert stats.sd_diff == 0.0
        assert stats.pearson_r == 1.0
        assert stats.rpc == 0.0

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(11)
        gt = rng.uniform(20, 80, size=12)
        pred = gt + rng.normal(0, 3, size=12)
        stats = bland_altman(list(zip(gt, pred)))
        diffs = pred - gt
        assert stats.mean_diff == pytest.approx(diffs.mean())
        assert stats.sd_diff == pytest.approx(diffs.std(ddof=1))
        assert stats.loa_low == pytest.approx(diffs.mean() - 1.96 * diffs.std(ddof=1))
        assert stats.loa_high == pytest.approx(diffs.mean() + 1.96 * diffs.std(ddof=1))
        grand = np.concatenate([gt, pred]).mean()
        assert stats.cv_pct == pytest.approx(diffs.std(ddof=1) / grand * 100)
        assert stats.rpc_pct == pytest.approx(1.96 * diffs.std(ddof=1) / grand * 100)
        assert stats.pearson_r == pytest.approx(np.corrcoef(gt, pred)[0, 1])

    def test_outside_indices_flag_loa_violations(self):
        # Nine tight pairs and one far outlier: the outlier's difference
        # must fall outside mean -+ 1.96 sd.
        pairs = [(float(i), float(i) + 0.1 * (i % 2)) for i in range(9)]
        pairs.append((50.0, 80.0))
        stats = bland_altman(pairs)
        assert 9 in stats.outside_indices

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError, match="at least 2"):
            bland_altman([(1.0, 2.0)])

    def test_zero_grand_mean_percent_convention(self):
        stats = bland_altman([(-1.0, 1.0), (1.0, -1.0)])
        assert stats.cv_pct == 0.0
        assert stats.rpc_pct == 0.0

    def test_constant_nonidentical_diffs_have_zero_sd(self):
        stats = bland_altman([(1.0, 2.0), (2.0, 3.0), (3.0, 4.0)])
        assert stats.mean_diff == pytest.approx(1.0)
        assert stats.sd_diff == 0.0
        assert stats.pearson_r == pytest.approx(1.0)
        assert stats.outside_indices == ()


class TestMeanSd:
    def test_single_value(self):
        assert mean_sd([4.0]) == (4.0, 0.0)

    def test_sample_sd(self):
        mean, sd = mean_sd([1.0, 2.0, 3.0])
        assert mean == pytest.approx(2.0)
        assert sd == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            mean_sd([])
