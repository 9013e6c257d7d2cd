"""Confusion counts and the AC/SE/SP/PC/F1/JS segmentation metrics.

Division-by-zero conventions (vacuous truth): SE is 1 when there are no
positives, SP is 1 when there are no negatives, PC is 1 when nothing was
predicted positive, and F1/JS are 1 when GT and SR are both empty.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ConfigurationError, DataError
from ..nn.tensor_autograd import Tensor
from ..schemas import METRIC_COLUMNS, MetricsReport

DEFAULT_THRESHOLD = 0.5
CONVENTIONS_FOOTER = (
    "0/0 conventions: SE=1 when TP+FN=0; SP=1 when TN+FP=0; PC=1 when TP+FP=0; "
    "F1=JS=1 when GT and SR are both empty."
)


class Aggregation(str, Enum):
    micro = "micro"
    macro = "macro"


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel tallies; a commutative monoid under ``+``."""

    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.TP + other.TP, self.TN + other.TN, self.FP + other.FP, self.FN + other.FN)

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


def _array(values: Tensor | np.ndarray) -> np.ndarray:
    return values.data if isinstance(values, Tensor) else np.asarray(values)


def binarize(probs: Tensor | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where ``probs >= threshold``, else 0 (uint8)."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold must lie in [0, 1], got {threshold}")
    return (_array(probs) >= threshold).astype(np.uint8)


def _binary(mask: Tensor | np.ndarray, name: str) -> np.ndarray:
    array = _array(mask)
    if array.size and not np.isin(array, (0, 1)).all():
        raise DataError(f"{name} mask must contain only 0 and 1")
    return array.astype(bool)


def confusion_counts(pred: Tensor | np.ndarray, gt: Tensor | np.ndarray) -> ConfusionCounts:
    sr = _binary(pred, "prediction")
    truth = _binary(gt, "ground truth")
    if sr.shape != truth.shape:
        raise DataError(f"prediction shape {sr.shape} does not match ground truth shape {truth.shape}")
    tp = int(np.count_nonzero(sr & truth))
    fp = int(np.count_nonzero(sr & ~truth))
    fn = int(np.count_nonzero(~sr & truth))
    tn = sr.size - tp - fp - fn
    return ConfusionCounts(TP=tp, TN=tn, FP=fp, FN=fn)


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 1.0


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    if counts.total <= 0:
        raise DataError("cannot compute metrics from all-zero confusion counts")
    tp, tn, fp, fn = counts.TP, counts.TN, counts.FP, counts.FN
    return MetricsReport(
        AC=(tp + tn) / counts.total,
        SE=_ratio(tp, tp + fn),
        SP=_ratio(tn, tn + fp),
        PC=_ratio(tp, tp + fp),
        F1=_ratio(2 * tp, 2 * tp + fp + fn),
        JS=_ratio(tp, tp + fp + fn),
    )


def jaccard_set(sr: Tensor | np.ndarray, gt: Tensor | np.ndarray) -> float:
    """|GT ∩ SR| / |GT ∪ SR| computed on the masks as sets."""
    predicted = _binary(sr, "prediction")
    truth = _binary(gt, "ground truth")
    union = np.count_nonzero(predicted | truth)
    return _ratio(int(np.count_nonzero(predicted & truth)), int(union))


def dice_set(sr: Tensor | np.ndarray, gt: Tensor | np.ndarray) -> float:
    """2|GT ∩ SR| / (|GT| + |SR|)."""
    predicted = _binary(sr, "prediction")
    truth = _binary(gt, "ground truth")
    return _ratio(2 * int(np.count_nonzero(predicted & truth)), int(predicted.sum() + truth.sum()))


def accumulate(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for item in counts:
        total = total + item
    return total


def aggregate_metrics(per_image: Sequence[ConfusionCounts], mode: Aggregation | str = Aggregation.micro) -> MetricsReport:
    """Micro: metrics of the pooled counts. Macro: mean of per-image metrics."""
    if not per_image:
        raise DataError("no confusion counts to aggregate")
    if Aggregation(mode) is Aggregation.micro:
        return compute_metrics(accumulate(per_image))
    reports = [compute_metrics(c) for c in per_image]
    means = {column: float(np.mean([getattr(r, column) for r in reports])) for column in METRIC_COLUMNS}
    return MetricsReport(**means)


def format_table(rows: Sequence[tuple[str, str, MetricsReport]], aggregation: Aggregation | str = Aggregation.micro) -> str:
    """Aligned ``Dataset Methods AC SE SP PC F1 JS`` table with a conventions footer."""
    header = ["Dataset", "Methods", *METRIC_COLUMNS]
    body = [[dataset, method, *report.formatted()] for dataset, method, report in rows]
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in [header, *body]]
    rule = "-" * len(lines[0])
    footer = f"aggregation: {Aggregation(aggregation).value}. {CONVENTIONS_FOOTER}"
    return "\n".join([rule, lines[0], rule, *lines[1:], rule, footer])
