"""Regime presets, file conventions and the sectioned run configuration.

Config files are INI-style ``key = value`` text::

    [run]
    seed = 7
    regime = drive

    [model]
    variant = unet
    mix = true
    kernel_sizes = 1,3,5,7

Every key name is unique across sections, so ``--key value`` overrides on the
command line do not need a section prefix.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import Field, model_validator

from .errors import ConfigurationError
from .nn.architectures import ArchitectureSpec
from .schemas import StrictModel

SUPPORTED_FORMATS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".ppm", ".pgm"}
MASK_SUFFIX = "_mask"
PREDICTION_SUFFIX = "_pred"
MASK_THRESHOLD = 128

THREADS_ENV = "MIXSEG_THREADS"
LEDGER_ENV = "MIXSEG_LEDGER"

MANIFEST_FILE = "manifest.txt"
STATS_FILE = "normalization.json"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
LEDGER_FILE = "runs.db"


class Regime(str, Enum):
    skin = "skin"
    drive = "drive"
    chase = "chase"


@dataclass(frozen=True)
class RegimePreset:
    resize: tuple[int, int] | None
    square: int | None
    patch_size: int | None
    patch_count: int | None
    split_ratios: tuple[float, float, float]
    batch_size: int

    @property
    def patched(self) -> bool:
        return self.patch_size is not None


REGIMES: dict[Regime, RegimePreset] = {
    Regime.skin: RegimePreset(
        resize=(192, 256), square=None, patch_size=None, patch_count=None,
        split_ratios=(0.7, 0.1, 0.2), batch_size=4,
    ),
    Regime.drive: RegimePreset(
        resize=None, square=576, patch_size=48, patch_count=531265,
        split_ratios=(0.5, 0.0, 0.5), batch_size=32,
    ),
    Regime.chase: RegimePreset(
        resize=None, square=960, patch_size=48, patch_count=412400,
        split_ratios=(20 / 28, 0.0, 8 / 28), batch_size=32,
    ),
}


class RunSection(StrictModel):
    seed: int = Field(0, description="Seed for every random draw of a command")
    regime: Regime = Field(Regime.skin, description="skin, drive or chase preprocessing")


class DataSection(StrictModel):
    patch_count: int | None = Field(None, ge=1, description="Training patches; regime preset if omitted")
    patch_val_fraction: float = Field(0.1, ge=0.0, lt=1.0, description="Tail of the patch list used for validation")
    test_stride: int = Field(24, ge=1, description="Stride of the dense test-time patch grid")
    train_ratio: float | None = Field(None, ge=0.0, le=1.0)
    val_ratio: float | None = Field(None, ge=0.0, le=1.0)
    test_ratio: float | None = Field(None, ge=0.0, le=1.0)
    limit: int | None = Field(None, ge=1, description="Cap on training items, for smoke runs")
    augment: bool = Field(True, description="Apply random augmentation to training batches")
    max_shift: float = Field(0.1, ge=0.0, lt=1.0)
    max_crop: float = Field(0.1, ge=0.0, lt=1.0)
    contrast: float = Field(0.2, ge=0.0, lt=1.0)
    brightness: float = Field(0.1, ge=0.0, le=1.0)
    hue: float = Field(0.05, ge=0.0, le=0.5)

    @model_validator(mode="after")
    def _ratios_together(self) -> DataSection:
        given = [r is not None for r in (self.train_ratio, self.val_ratio, self.test_ratio)]
        if any(given) and not all(given):
            raise ValueError("train_ratio, val_ratio and test_ratio must be set together")
        return self


class TrainSection(StrictModel):
    epochs: int = Field(50, ge=1)
    batch_size: int | None = Field(None, ge=1, description="Regime preset if omitted")
    learning_rate: float = Field(0.001, gt=0.0)
    patience: int = Field(10, ge=1, description="Non-improving epochs before the lr drop")
    factor: float = Field(0.1, gt=0.0, lt=1.0)
    threshold: float = Field(0.5, ge=0.0, le=1.0, description="Binarization threshold")
    aggregation: str = Field("micro", pattern="^(micro|macro)$")
    threads: int | None = Field(None, ge=1, description="Data-loading workers; MIXSEG_THREADS if omitted")


class PathsSection(StrictModel):
    data_dir: Path = Field(Path("data"))
    output_dir: Path = Field(Path("runs"))
    cache_dir: Path | None = Field(None, description="Defaults to <output_dir>/cache")
    ledger: Path | None = Field(None, description="Defaults to $MIXSEG_LEDGER or <output_dir>/runs.db")


class RunConfig(StrictModel):
    run: RunSection = RunSection()
    data: DataSection = DataSection()
    model: ArchitectureSpec = ArchitectureSpec()
    train: TrainSection = TrainSection()
    paths: PathsSection = PathsSection()

    @property
    def preset(self) -> RegimePreset:
        return REGIMES[self.run.regime]

    @property
    def batch_size(self) -> int:
        return self.train.batch_size or self.preset.batch_size

    @property
    def patch_count(self) -> int | None:
        return self.data.patch_count or self.preset.patch_count

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        if self.data.train_ratio is None:
            return self.preset.split_ratios
        return (self.data.train_ratio, self.data.val_ratio, self.data.test_ratio)  # type: ignore[return-value]

    @property
    def cache_dir(self) -> Path:
        return self.paths.cache_dir or self.paths.output_dir / "cache"

    @property
    def ledger_path(self) -> Path:
        if self.paths.ledger is not None:
            return self.paths.ledger
        env = os.getenv(LEDGER_ENV)
        return Path(env) if env else self.paths.output_dir / LEDGER_FILE

    @property
    def threads(self) -> int:
        if self.train.threads is not None:
            return self.train.threads
        return env_threads()


SECTIONS: dict[str, type[StrictModel]] = {
    "run": RunSection,
    "data": DataSection,
    "model": ArchitectureSpec,
    "train": TrainSection,
    "paths": PathsSection,
}
KEY_SECTIONS: dict[str, str] = {key: section for section, model in SECTIONS.items() for key in model.model_fields}


def env_threads() -> int:
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def load_run_config(path: Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``--key value`` overrides, validate."""
    values: dict[str, dict[str, Any]] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigurationError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config file {path}: {exc}") from exc
        if parser.defaults():
            raise ConfigurationError(f"keys outside a section are not allowed: {sorted(parser.defaults())}")
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigurationError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
            values[section] = dict(parser[section].items())

    for key, value in (overrides or {}).items():
        normalized = key.replace("-", "_")
        section = KEY_SECTIONS.get(normalized)
        if section is None:
            raise ConfigurationError(f"unknown config key {key!r}")
        values.setdefault(section, {})[normalized] = value

    return RunConfig.create(**values)
