from __future__ import annotations

import argparse
import csv
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NoReturn

import numpy as np

from ..config import (
    BEST_CHECKPOINT,
    MANIFEST_FILE,
    METRICS_FILE,
    PREDICTION_SUFFIX,
    RunConfig,
    load_run_config,
)
from ..database import ledger_session
from ..errors import CheckpointError, ConfigurationError, DataError, DimensionError, MixSegError, NumericError
from ..nn.architectures import Network, build_network
from ..schemas import METRIC_COLUMNS, MetricsReport
from ..services.checkpoint import Checkpoint, load_checkpoint, restore_network
from ..services.data_pipeline import (
    AugmentConfig,
    ChannelStats,
    PatchSet,
    Sample,
    compute_channel_stats,
    extract_patches,
    ingest,
    load_patch_index,
    load_split,
    load_stats,
    normalize,
    preprocess,
    read_image,
    save_patch_index,
    save_split,
    save_stats,
    split_dataset,
    write_mask,
)
from ..services.gradcheck import format_report, run_gradcheck
from ..services.inference import evaluate, predict_image
from ..services.metrics import Aggregation, binarize, format_table
from ..services.run_ledger import fail_run, finish_run, format_runs, list_runs, run_stats, start_run
from ..services.training import EpochRecord, TrainSettings, train

logger = logging.getLogger("mixseg.cli")

EXIT_CODES: list[tuple[type[Exception], int]] = [
    (ConfigurationError, 1),
    (NumericError, 3),
    (DataError, 2),
    (DimensionError, 2),
    (CheckpointError, 2),
]
UNEXPECTED_EXIT = 1


def exit_code_for(exc: BaseException) -> int:
    for error_type, code in EXIT_CODES:
        if isinstance(exc, error_type):
            return code
    return UNEXPECTED_EXIT


@dataclass
class Outcome:
    metrics: dict[str, Any] | None = None
    output_path: Path | None = None


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise ConfigurationError(f"{self.prog}: {message}")


def parse_overrides(extra: Sequence[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs into a flat override map."""
    overrides: dict[str, str] = {}
    items = list(extra)
    while items:
        token = items.pop(0)
        if not token.startswith("--") or token == "--":
            raise ConfigurationError(f"unexpected argument {token!r}; overrides take the form --key value")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if not items or items[0].startswith("--"):
                raise ConfigurationError(f"missing value for --{key}")
            value = items.pop(0)
        overrides[key] = value
    return overrides


def _load_model(config: RunConfig, checkpoint_path: Path | None) -> tuple[Checkpoint, Network, ChannelStats]:
    path = checkpoint_path or config.paths.output_dir / BEST_CHECKPOINT
    checkpoint = load_checkpoint(path)
    if checkpoint.spec != config.model:
        raise CheckpointError(
            f"checkpoint {path} holds {checkpoint.spec.display_name} {checkpoint.spec.model_dump(mode='json')}, "
            f"config asks for {config.model.display_name} {config.model.model_dump(mode='json')}"
        )
    net = restore_network(checkpoint, build_network(checkpoint.spec, seed=config.run.seed))
    stats = checkpoint.stats or load_stats(config.cache_dir)
    return checkpoint, net, stats


def _limit(dataset: list[Sample] | PatchSet, limit: int | None) -> list[Sample] | PatchSet:
    if limit is None or limit >= len(dataset):
        return dataset
    if isinstance(dataset, PatchSet):
        return dataset.subset(slice(0, limit))
    return dataset[:limit]


def _train_settings(config: RunConfig) -> TrainSettings:
    data = config.data
    augment = None
    if data.augment:
        augment = AugmentConfig(
            max_shift=data.max_shift,
            max_crop=data.max_crop,
            contrast=data.contrast,
            brightness=data.brightness,
            hue=data.hue,
        )
    return TrainSettings(
        epochs=config.train.epochs,
        batch_size=config.batch_size,
        learning_rate=config.train.learning_rate,
        patience=config.train.patience,
        factor=config.train.factor,
        threshold=config.train.threshold,
        seed=config.run.seed,
        augment=augment,
        threads=config.threads,
        aggregation=Aggregation(config.train.aggregation),
    )


def cmd_prepare(config: RunConfig, args: argparse.Namespace) -> Outcome:
    preset = config.preset
    cache_dir = config.cache_dir
    raw = ingest(config.paths.data_dir)
    if not raw:
        raise DataError(f"no image/mask pairs found in {config.paths.data_dir}")
    channels = sorted({sample.image.shape[-1] for sample in raw})
    if channels != [config.model.in_channels]:
        raise DataError(
            f"images have {channels} channels but in_channels is {config.model.in_channels} "
            f"for the {config.run.regime.value} regime"
        )
    samples = {sample.source_id: preprocess(sample, preset) for sample in raw}

    manifest = split_dataset(sorted(samples), config.split_ratios, config.run.seed)
    manifest.save(cache_dir / MANIFEST_FILE)
    splits = {split: [samples[i] for i in manifest.ids(split)] for split in ("train", "val", "test")}
    for split, members in splits.items():
        save_split(cache_dir, split, members)
    stats = compute_channel_stats(splits["train"])
    save_stats(cache_dir, stats)

    summary = {split: len(members) for split, members in splits.items()}
    if preset.patched:
        patches = extract_patches(splits["train"], preset.patch_size, config.patch_count, config.run.seed)
        save_patch_index(cache_dir, "train", patches)
        summary["patches"] = len(patches)
    print(f"prepared {config.run.regime.value}: " + " ".join(f"{k}={v}" for k, v in summary.items()))
    return Outcome(metrics=summary, output_path=cache_dir)


def cmd_train(config: RunConfig, args: argparse.Namespace) -> Outcome:
    cache_dir = config.cache_dir
    stats = load_stats(cache_dir)
    train_samples = load_split(cache_dir, "train")
    if config.preset.patched:
        patches = load_patch_index(cache_dir, "train", train_samples)
        train_set, val_set = patches.split_tail(config.data.patch_val_fraction)
    else:
        train_set, val_set = train_samples, load_split(cache_dir, "val")
    train_set = _limit(train_set, config.data.limit)

    net = build_network(config.model, seed=config.run.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.spec != config.model:
        raise CheckpointError(f"cannot resume {resume.spec.display_name} as {config.model.display_name}")

    def report(record: EpochRecord) -> None:
        val = "" if record.val is None else " " + " ".join(
            f"{column}={value:.4f}" for column, value in zip(METRIC_COLUMNS, record.val.values())
        )
        print(f"epoch {record.epoch} loss={record.train_loss:.6f} lr={record.lr:.3g}{val}", flush=True)

    logger.info(
        "Training %s (%d parameters) on %d items, validating on %d",
        config.model.display_name, net.parameter_count(), len(train_set), len(val_set),
    )
    result = train(
        net, train_set, val_set, _train_settings(config), stats, config.paths.output_dir,
        resume=resume, on_epoch=report,
    )
    last = result.history[-1] if result.history else None
    metrics = None
    if last is not None:
        metrics = {"train_loss": last.train_loss, "lr": last.lr}
        if last.val is not None:
            metrics.update(last.val.model_dump())
    return Outcome(metrics=metrics, output_path=result.best_path)


def _append_metrics_row(path: Path, row: dict[str, Any]) -> None:
    header = ["dataset", "method", "aggregation", *METRIC_COLUMNS]
    new_file = not path.is_file()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=header, lineterminator="\n")
        if new_file:
            writer.writeheader()
        writer.writerow(row)


def _accumulated_rows(path: Path, aggregation: Aggregation) -> list[tuple[str, str, MetricsReport]]:
    """Latest row per (dataset, method) in first-seen order, for one aggregation mode."""
    latest: dict[tuple[str, str], MetricsReport] = {}
    with path.open(encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            if row["aggregation"] != aggregation.value:
                continue
            report = MetricsReport(**{column: float(row[column]) for column in METRIC_COLUMNS})
            latest[(row["dataset"], row["method"])] = report
    return [(dataset, method, report) for (dataset, method), report in latest.items()]


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> Outcome:
    checkpoint, net, stats = _load_model(config, args.checkpoint)
    test = load_split(config.cache_dir, "test")
    if not test:
        raise DataError(f"test split in {config.cache_dir} is empty")
    result = evaluate(
        net, test, stats,
        threshold=config.train.threshold,
        batch_size=config.batch_size,
        aggregation=config.train.aggregation,
        patch_size=config.preset.patch_size,
        stride=config.data.test_stride,
    )
    dataset = args.dataset or config.run.regime.value
    method = checkpoint.spec.display_name
    output = config.paths.output_dir / METRICS_FILE
    _append_metrics_row(
        output,
        {"dataset": dataset, "method": method, "aggregation": result.aggregation.value, **result.report.model_dump()},
    )
    print(format_table(_accumulated_rows(output, result.aggregation), result.aggregation))
    return Outcome(metrics=result.report.model_dump(), output_path=output)


def cmd_predict(config: RunConfig, args: argparse.Namespace) -> Outcome:
    if not args.images:
        raise ConfigurationError("predict needs at least one --images path")
    _, net, stats = _load_model(config, args.checkpoint)
    out_dir = args.out or config.paths.output_dir / "predictions"
    preset = config.preset
    for path in args.images:
        image = read_image(Path(path))
        blank = np.zeros((*image.shape[:2], 1), dtype=np.uint8)
        sample = normalize(preprocess(Sample(image, blank, Path(path).stem), preset), stats)
        probs = predict_image(net, sample.image, config.batch_size, preset.patch_size, config.data.test_stride)
        target = write_mask(out_dir / f"{sample.source_id}{PREDICTION_SUFFIX}.png", binarize(probs, config.train.threshold))
        print(target)
    return Outcome(metrics={"images": len(args.images)}, output_path=out_dir)


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> Outcome:
    results = run_gradcheck(seeds=range(args.seeds))
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return Outcome(metrics={"items": len(results), "max_error": max(r.max_error for r in results)})


def cmd_runs(config: RunConfig, args: argparse.Namespace) -> Outcome:
    with ledger_session(config.ledger_path) as db:
        print(format_runs(list_runs(db), run_stats(db)))
    return Outcome()


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], Outcome]] = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "runs": cmd_runs,
}
UNRECORDED = {"gradcheck", "runs"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixseg", description="Mixed-kernel U-Net family segmentation toolkit.", allow_abbrev=False)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "prepare": "Split, preprocess and cache a dataset directory",
        "train": "Train a network on the prepared cache",
        "eval": "Score a checkpoint on the test split",
        "predict": "Write predicted masks for images",
        "gradcheck": "Finite-difference check of every op and block",
        "runs": "List recorded runs",
    }
    for name, help_text in helps.items():
        sub = commands.add_parser(
            name,
            help=help_text,
            description=f"{help_text}. Extra --key value pairs override config keys.",
            allow_abbrev=False,
        )
        sub.add_argument("--config", type=Path, default=None, help="INI-style config file")
        sub.add_argument("--verbose", action="store_true", help="Debug logging")
        if name == "train":
            sub.add_argument("--resume", type=Path, default=None, help="Continue from a checkpoint")
        if name in {"eval", "predict"}:
            sub.add_argument("--checkpoint", type=Path, default=None, help="Defaults to <output_dir>/best.ckpt")
        if name == "eval":
            sub.add_argument("--dataset", default=None, help="Dataset label in the report row")
        if name == "predict":
            sub.add_argument("--images", nargs="+", type=Path, default=[], help="Input image files")
            sub.add_argument("--out", type=Path, default=None, help="Defaults to <output_dir>/predictions")
        if name == "gradcheck":
            sub.add_argument("--seeds", type=int, default=1, help="Number of random seeds per item")
    return parser


def _dispatch(args: argparse.Namespace, extra: Sequence[str]) -> int:
    config = load_run_config(args.config, parse_overrides(extra))
    handler = COMMANDS[args.command]
    if args.command in UNRECORDED:
        handler(config, args)
        return 0
    with ledger_session(config.ledger_path) as db:
        record = start_run(db, args.command, config)
        try:
            outcome = handler(config, args)
        except Exception as exc:
            fail_run(db, record, f"{type(exc).__name__}: {exc}")
            raise
        finish_run(db, record, outcome.metrics, outcome.output_path)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except ConfigurationError as exc:
        print(f"error: {exc}")
        return exit_code_for(exc)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        return _dispatch(args, extra)
    except MixSegError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}")
        return exit_code_for(exc)
    except Exception as exc:
        logger.exception("%s failed unexpectedly", args.command)
        print(f"error: unexpected {type(exc).__name__}: {exc}")
        return exit_code_for(exc)
