from collections import Counter

import numpy as np
import pytest

from mixseg.errors import ConfigurationError, DataError
from mixseg.schemas import MetricsReport
from mixseg.services.metrics import (
    Aggregation,
    ConfusionCounts,
    accumulate,
    aggregate_metrics,
    binarize,
    compute_metrics,
    confusion_counts,
    dice_set,
    format_table,
    jaccard_set,
)


def naive_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    tally = Counter(zip(pred.ravel().tolist(), gt.ravel().tolist()))
    return ConfusionCounts(TP=tally[(1, 1)], TN=tally[(0, 0)], FP=tally[(1, 0)], FN=tally[(0, 1)])


def test_worked_instance() -> None:
    report = compute_metrics(ConfusionCounts(TP=3, TN=4, FP=1, FN=2))
    expected = [0.7, 0.6, 0.8, 0.75, 0.6667, 0.5]
    assert report.values() == pytest.approx(expected, abs=1e-4)


def test_random_pairs_match_naive_tally_and_set_forms() -> None:
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        density = rng.uniform(0.05, 0.95)
        pred = (rng.random((32, 32)) < density).astype(np.uint8)
        gt = (rng.random((32, 32)) < density).astype(np.uint8)
        counts = confusion_counts(pred, gt)
        assert counts == naive_counts(pred, gt)
        report = compute_metrics(counts)
        assert report.JS == jaccard_set(pred, gt)
        assert report.F1 == pytest.approx(dice_set(pred, gt), abs=1e-12)
        assert report.F1 == pytest.approx(2 * report.JS / (1 + report.JS), abs=1e-12)


def test_empty_masks_follow_vacuous_conventions() -> None:
    empty = np.zeros((4, 4), dtype=np.uint8)
    report = compute_metrics(confusion_counts(empty, empty))
    assert (report.SE, report.PC, report.F1, report.JS, report.AC, report.SP) == (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert jaccard_set(empty, empty) == 1.0
    assert dice_set(empty, empty) == 1.0

    full = np.ones((4, 4), dtype=np.uint8)
    assert compute_metrics(confusion_counts(full, full)).SP == 1.0


def test_constant_half_predictor_is_all_positive() -> None:
    gt = np.zeros((8, 8, 1), dtype=np.uint8)
    gt[:4] = 1
    report = compute_metrics(confusion_counts(binarize(np.full((8, 8, 1), 0.5), 0.5), gt))
    assert report.SE == 1.0
    assert report.SP == 0.0


def test_binarize_is_inclusive_and_validates_threshold() -> None:
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.9])), [0, 1, 1])
    with pytest.raises(ConfigurationError):
        binarize(np.array([0.5]), 1.5)


def test_confusion_counts_reject_bad_masks() -> None:
    with pytest.raises(DataError, match="only 0 and 1"):
        confusion_counts(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(DataError, match="shape"):
        confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DataError):
        compute_metrics(ConfusionCounts())


def test_counts_form_a_monoid() -> None:
    a = ConfusionCounts(1, 2, 3, 4)
    b = ConfusionCounts(5, 6, 7, 8)
    assert a + b == b + a == ConfusionCounts(6, 8, 10, 12)
    assert accumulate([a, b, ConfusionCounts()]) == a + b
    assert (a + b).total == 36


def test_micro_and_macro_aggregation_differ() -> None:
    per_image = [ConfusionCounts(TP=9, TN=0, FP=1, FN=0), ConfusionCounts(TP=0, TN=9, FP=0, FN=1)]
    micro = aggregate_metrics(per_image, Aggregation.micro)
    macro = aggregate_metrics(per_image, "macro")
    assert micro.SE == pytest.approx(0.9)
    assert macro.SE == pytest.approx((1.0 + 0.0) / 2)
    with pytest.raises(DataError):
        aggregate_metrics([])


def test_table_formats_four_decimals() -> None:
    row = MetricsReport(AC=0.9479, SE=0.8294, SP=0.9843, PC=0.9312, F1=0.8774, JS=0.7673)
    table = format_table([("Skin", "MixU-Net", row)], Aggregation.micro)
    lines = table.splitlines()
    assert lines[1].split() == ["Dataset", "Methods", "AC", "SE", "SP", "PC", "F1", "JS"]
    assert lines[3].split() == ["Skin", "MixU-Net", "0.9479", "0.8294", "0.9843", "0.9312", "0.8774", "0.7673"]
    assert "aggregation: micro" in lines[-1]
    assert "SP=1 when TN+FP=0" in lines[-1]
