"""Batched forward passes, patch-grid reconstruction and test-set evaluation."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..nn.architectures import Network, forward
from ..nn.tensor_autograd import Tensor
from ..schemas import MetricsReport
from .data_pipeline import ChannelStats, Sample, grid_origins, normalize, reconstruct_from_patches
from .metrics import Aggregation, ConfusionCounts, aggregate_metrics, binarize, confusion_counts

logger = logging.getLogger("mixseg.inference")


@dataclass
class EvaluationResult:
    report: MetricsReport
    per_image: list[ConfusionCounts]
    aggregation: Aggregation


def predict_batch(net: Network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities for a (n, h, w, c) array, run ``batch_size`` at a time."""
    outputs = []
    for start in range(0, len(images), batch_size):
        chunk = np.ascontiguousarray(images[start : start + batch_size], dtype=np.float32)
        outputs.append(forward(net, Tensor(chunk), training=False).data)
    return np.concatenate(outputs) if outputs else np.zeros((0, *images.shape[1:3], net.spec.out_channels))


def predict_patched(net: Network, image: np.ndarray, size: int, stride: int, batch_size: int = 32) -> np.ndarray:
    """Cover ``image`` with a dense patch grid and average the overlapping predictions."""
    height, width = image.shape[:2]
    origins = grid_origins(height, width, size, stride)
    patches = np.stack([image[r : r + size, c : c + size] for r, c in origins])
    probs = predict_batch(net, patches, batch_size)
    return reconstruct_from_patches(probs, origins, (height, width))


def predict_image(
    net: Network, image: np.ndarray, batch_size: int, patch_size: int | None = None, stride: int = 24
) -> np.ndarray:
    if patch_size is None:
        return predict_batch(net, image[None], batch_size)[0]
    return predict_patched(net, image, patch_size, stride, batch_size)


def evaluate(
    net: Network,
    samples: Sequence[Sample],
    stats: ChannelStats,
    threshold: float = 0.5,
    batch_size: int = 8,
    aggregation: Aggregation | str = Aggregation.micro,
    patch_size: int | None = None,
    stride: int = 24,
) -> EvaluationResult:
    """Binarise predictions at ``threshold`` and score them against each sample's mask.

    With ``patch_size`` every sample is a full image rebuilt from a stride grid;
    otherwise samples are predicted whole, ``batch_size`` at a time.
    """
    per_image: list[ConfusionCounts] = []
    if patch_size is None:
        for start in range(0, len(samples), batch_size):
            stop = min(start + batch_size, len(samples))
            chunk = [normalize(samples[i], stats) for i in range(start, stop)]
            probs = predict_batch(net, np.stack([s.image for s in chunk]), batch_size)
            per_image.extend(confusion_counts(binarize(p, threshold), s.mask) for p, s in zip(probs, chunk))
    else:
        for sample in samples:
            probs = predict_patched(net, normalize(sample, stats).image, patch_size, stride, batch_size)
            per_image.append(confusion_counts(binarize(probs, threshold), sample.mask))
    mode = Aggregation(aggregation)
    report = aggregate_metrics(per_image, mode)
    logger.debug("Evaluated %d images (%s): F1=%.4f", len(per_image), mode.value, report.F1)
    return EvaluationResult(report, per_image, mode)
