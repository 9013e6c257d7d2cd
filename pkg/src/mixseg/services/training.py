"""Adam, the training-loss plateau schedule, and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from ..config import BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT
from ..errors import ConfigurationError, DataError, NumericError
from ..nn.architectures import Network, forward
from ..nn.tensor_autograd import Tape, Tensor, backward, bce_loss
from ..schemas import METRIC_COLUMNS, MetricsReport
from .checkpoint import (
    MOMENT1_PREFIX,
    MOMENT2_PREFIX,
    Checkpoint,
    CheckpointHeader,
    OptimizerHeader,
    ScheduleHeader,
    network_tensors,
    restore_network,
    save_checkpoint,
)
from .data_pipeline import AugmentConfig, ChannelStats, Sample, make_batch, sample_seed
from .inference import evaluate
from .metrics import Aggregation

logger = logging.getLogger("mixseg.training")

IMPROVEMENT_EPSILON = 1e-6
HISTORY_COLUMNS = ("epoch", "train_loss", "lr", *(f"val_{column}" for column in METRIC_COLUMNS))


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def header(self) -> OptimizerHeader:
        return OptimizerHeader(lr=self.lr, step=self.step, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True)
class ScheduleState:
    lr: float = 0.001
    best_loss: float = math.inf
    epochs_since_improvement: int = 0
    patience: int = 10
    factor: float = 0.1

    def header(self) -> ScheduleHeader:
        return ScheduleHeader(
            lr=self.lr,
            best_loss=None if math.isinf(self.best_loss) else self.best_loss,
            epochs_since_improvement=self.epochs_since_improvement,
            patience=self.patience,
            factor=self.factor,
        )

    @classmethod
    def from_header(cls, header: ScheduleHeader) -> ScheduleState:
        return cls(
            lr=header.lr,
            best_loss=math.inf if header.best_loss is None else header.best_loss,
            epochs_since_improvement=header.epochs_since_improvement,
            patience=header.patience,
            factor=header.factor,
        )


def adam_step(params: Sequence[tuple[str, Tensor]], state: OptimizerState) -> None:
    """One bias-corrected Adam update over ``params``; gradients are cleared afterwards.

    A parameter without a gradient is treated as having a zero gradient.
    Every gradient is checked before any parameter moves.
    """
    for name, tensor in params:
        if tensor.grad is not None and not np.isfinite(tensor.grad).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, tensor in params:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m.astype(tensor.dtype, copy=False)
        state.v[name] = v.astype(tensor.dtype, copy=False)
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data = (tensor.data - update).astype(tensor.dtype, copy=False)
        tensor.grad = None


def plateau_update(state: ScheduleState, epoch_train_loss: float) -> ScheduleState:
    """Reduce lr by ``factor`` after ``patience`` epochs without a training-loss improvement."""
    if epoch_train_loss < state.best_loss - IMPROVEMENT_EPSILON:
        return replace(state, best_loss=epoch_train_loss, epochs_since_improvement=0)
    waited = state.epochs_since_improvement + 1
    if waited >= state.patience:
        lr = state.lr * state.factor
        logger.info("Training loss plateaued for %d epochs; lr %.3g -> %.3g", waited, state.lr, lr)
        return replace(state, lr=lr, epochs_since_improvement=0)
    return replace(state, epochs_since_improvement=waited)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 0.001
    patience: int = 10
    factor: float = 0.1
    threshold: float = 0.5
    seed: int = 0
    augment: AugmentConfig | None = None
    threads: int = 1
    aggregation: Aggregation = Aggregation.micro


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    val: MetricsReport | None = None

    def row(self) -> list[str]:
        values = self.val.values() if self.val is not None else [math.nan] * len(METRIC_COLUMNS)
        return [str(self.epoch), repr(self.train_loss), repr(self.lr), *(repr(v) for v in values)]


@dataclass
class TrainingResult:
    history: list[EpochRecord]
    best_path: Path
    last_path: Path
    best_score: float | None


def history_csv(history: Sequence[EpochRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    writer.writerows(record.row() for record in history)
    return buffer.getvalue()


def read_history(path: Path) -> list[EpochRecord]:
    records = []
    with path.open(encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            metrics = {column: float(row[f"val_{column}"]) for column in METRIC_COLUMNS}
            val = None if any(math.isnan(v) for v in metrics.values()) else MetricsReport(**metrics)
            records.append(EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["lr"]), val))
    return records


def make_checkpoint(
    net: Network,
    epoch: int,
    settings: TrainSettings,
    optimizer: OptimizerState,
    schedule: ScheduleState,
    rng: np.random.Generator,
    stats: ChannelStats | None,
    best_score: float | None,
) -> Checkpoint:
    header = CheckpointHeader(
        architecture=net.spec,
        epoch=epoch,
        seed=settings.seed,
        rng_state=rng.bit_generator.state,
        schedule=schedule.header(),
        optimizer=optimizer.header(),
        normalization=None if stats is None else stats.to_dict(),
        best_f1=best_score,
    )
    tensors = network_tensors(net)
    tensors.update({MOMENT1_PREFIX + name: value for name, value in optimizer.m.items()})
    tensors.update({MOMENT2_PREFIX + name: value for name, value in optimizer.v.items()})
    return Checkpoint(header, tensors)


@dataclass
class _ResumeState:
    epoch: int
    optimizer: OptimizerState
    schedule: ScheduleState
    rng: np.random.Generator
    best_score: float | None


def _resume(checkpoint: Checkpoint, net: Network, settings: TrainSettings) -> _ResumeState:
    restore_network(checkpoint, net)
    header = checkpoint.header
    if header.optimizer is None or header.schedule is None or header.rng_state is None:
        raise DataError("checkpoint has no optimizer/schedule state to resume from")
    optimizer = OptimizerState(
        lr=header.optimizer.lr,
        beta1=header.optimizer.beta1,
        beta2=header.optimizer.beta2,
        eps=header.optimizer.eps,
        step=header.optimizer.step,
        m=checkpoint.with_prefix(MOMENT1_PREFIX),
        v=checkpoint.with_prefix(MOMENT2_PREFIX),
    )
    rng = np.random.default_rng(settings.seed)
    rng.bit_generator.state = header.rng_state
    return _ResumeState(header.epoch, optimizer, ScheduleState.from_header(header.schedule), rng, header.best_f1)


def train(
    net: Network,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    settings: TrainSettings,
    stats: ChannelStats,
    output_dir: Path,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[EpochRecord], Any] | None = None,
) -> TrainingResult:
    """Epochs of shuffled mini-batches with mean BCE loss and Adam.

    After each epoch the plateau schedule sees the mean training loss, the
    validation set is scored, ``last.ckpt`` and the history CSV are rewritten,
    and ``best.ckpt`` is replaced whenever validation F1 improves (training
    loss decreases when there is no validation set).
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if settings.batch_size < 1 or settings.epochs < 1:
        raise ConfigurationError("epochs and batch_size must be >= 1")
    output_dir.mkdir(parents=True, exist_ok=True)
    best_path = output_dir / BEST_CHECKPOINT
    last_path = output_dir / LAST_CHECKPOINT
    history_path = output_dir / HISTORY_FILE

    if resume is not None:
        state = _resume(resume, net, settings)
        history = read_history(history_path)[: state.epoch] if history_path.is_file() else []
        logger.info("Resuming %s at epoch %d (lr %.3g)", net.spec.display_name, state.epoch + 1, state.schedule.lr)
    else:
        state = _ResumeState(
            epoch=0,
            optimizer=OptimizerState(lr=settings.learning_rate),
            schedule=ScheduleState(lr=settings.learning_rate, patience=settings.patience, factor=settings.factor),
            rng=np.random.default_rng(settings.seed),
            best_score=None,
        )
        history = []

    params = list(net.named_parameters())
    n = len(train_set)
    for epoch in range(state.epoch + 1, settings.epochs + 1):
        order = state.rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, settings.batch_size):
            indices = order[start : start + settings.batch_size]
            seeds = [sample_seed(settings.seed, epoch, int(i)) for i in indices]
            images, masks = make_batch(train_set, indices, stats, settings.augment, seeds, settings.threads)
            with Tape() as tape:
                probs = forward(net, Tensor(images), training=True)
                loss = bce_loss(probs, masks)
                backward(loss, tape)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}; last good checkpoint is {last_path}")
            adam_step(params, state.optimizer)
            loss_sum += loss.item() * len(indices)

        train_loss = loss_sum / n
        state.schedule = plateau_update(state.schedule, train_loss)
        state.optimizer.lr = state.schedule.lr

        val_report = None
        if len(val_set):
            val_report = evaluate(
                net, val_set, stats, settings.threshold, settings.batch_size, settings.aggregation
            ).report
        record = EpochRecord(epoch, train_loss, state.schedule.lr, val_report)
        history.append(record)

        score = val_report.F1 if val_report is not None else -train_loss
        improved = state.best_score is None or score > state.best_score
        if improved:
            state.best_score = score
        checkpoint = make_checkpoint(
            net, epoch, settings, state.optimizer, state.schedule, state.rng, stats, state.best_score
        )
        save_checkpoint(checkpoint, last_path)
        if improved:
            save_checkpoint(checkpoint, best_path)
        history_path.write_text(history_csv(history), encoding="utf-8")

        logger.info(
            "epoch %d/%d loss=%.5f lr=%.3g val_F1=%s",
            epoch, settings.epochs, train_loss, state.schedule.lr,
            "n/a" if val_report is None else f"{val_report.F1:.4f}",
        )
        if on_epoch is not None:
            on_epoch(record)

    return TrainingResult(history, best_path, last_path, state.best_score)
