from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..config import MASK_SUFFIX, MASK_THRESHOLD, STATS_FILE, SUPPORTED_FORMATS, RegimePreset
from ..errors import ConfigurationError, DataError, DimensionError

logger = logging.getLogger("mixseg.pipeline")

SPLITS = ("train", "val", "test")
GRAYSCALE_MODES = {"1", "L", "LA", "I", "I;16", "F", "P"}


@dataclass
class Sample:
    """Image/mask pair. ``image`` is (h, w, c) float32, ``mask`` is (h, w, 1) uint8 in {0, 1}."""

    image: np.ndarray
    mask: np.ndarray
    source_id: str
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[-1] != 1:
            raise DataError(f"{self.source_id}: expected (h, w, c) image and (h, w, 1) mask")
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise DataError(
                f"{self.source_id}: image size {self.image.shape[:2]} does not match mask size {self.mask.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return getattr(self, split)

    def to_text(self) -> str:
        lines = [f"# seed={self.seed}", "split,source_id"]
        for split in SPLITS:
            lines.extend(f"{split},{source_id}" for source_id in self.ids(split))
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> SplitManifest:
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        parts: dict[str, list[str]] = {split: [] for split in SPLITS}
        seed = 0
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            elif line and not line.startswith("#") and line != "split,source_id":
                split, _, source_id = line.partition(",")
                if split not in parts or not source_id:
                    raise DataError(f"malformed manifest line in {path}: {line!r}")
                parts[split].append(source_id)
        return cls(parts["train"], parts["val"], parts["test"], seed)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, payload: dict[str, list[float]]) -> ChannelStats:
        return cls(np.asarray(payload["mean"], dtype=np.float64), np.asarray(payload["std"], dtype=np.float64))


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            mode = "L" if image.mode in GRAYSCALE_MODES else "RGB"
            array = np.asarray(image.convert(mode), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"unreadable image file {path.name}: {exc}") from exc
    return array[..., None] if array.ndim == 2 else array


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            array = np.asarray(image.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"unreadable mask file {path.name}: {exc}") from exc
    return (array >= MASK_THRESHOLD).astype(np.uint8)[..., None]


def pair_files(directory: Path) -> dict[str, tuple[Path, Path]]:
    """Map stem -> (image path, mask path) for ``<stem>.<ext>`` / ``<stem>_mask.<ext>``."""
    images: dict[str, Path] = {}
    masks: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if not path.is_file() or path.suffix.lower() not in SUPPORTED_FORMATS:
            continue
        if path.stem.endswith(MASK_SUFFIX):
            masks[path.stem[: -len(MASK_SUFFIX)]] = path
        else:
            images[path.stem] = path
    unpaired = sorted(
        [images[s].name for s in images.keys() - masks.keys()] + [masks[s].name for s in masks.keys() - images.keys()]
    )
    if unpaired:
        raise DataError(f"unpaired files in {directory}: {', '.join(unpaired)}")
    return {stem: (images[stem], masks[stem]) for stem in sorted(images)}


def ingest(directory: Path, stems: Sequence[str] | None = None) -> list[Sample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"data directory not found: {directory}")
    pairs = pair_files(directory)
    if not pairs:
        logger.warning("No image/mask pairs found in %s", directory)
        return []
    selected = pairs if stems is None else {stem: pairs[stem] for stem in stems if stem in pairs}
    missing = [] if stems is None else sorted(set(stems) - pairs.keys())
    if missing:
        raise DataError(f"no image/mask pair for: {', '.join(missing)}")
    samples = [
        Sample(_read_image(image_path), _read_mask(mask_path), stem)
        for stem, (image_path, mask_path) in selected.items()
    ]
    logger.info("Ingested %d samples from %s", len(samples), directory)
    return samples


def read_image(path: Path) -> np.ndarray:
    return _read_image(Path(path))


def write_mask(path: Path, mask: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(mask).reshape(mask.shape[0], mask.shape[1])
    Image.fromarray((values > 0).astype(np.uint8) * 255).save(path)
    return path


def _resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32)).resize(
            (width, height), Image.Resampling.BILINEAR
        ))
        for c in range(image.shape[-1])
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def _resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    resized = Image.fromarray(np.ascontiguousarray(mask[..., 0], dtype=np.uint8)).resize(
        (width, height), Image.Resampling.NEAREST
    )
    return (np.asarray(resized) > 0).astype(np.uint8)[..., None]


def resize_bilinear(sample: Sample, height: int, width: int) -> Sample:
    """Bilinear image resize; the mask uses nearest neighbour and stays binary."""
    if height < 1 or width < 1:
        raise ConfigurationError(f"resize target must be positive, got ({height}, {width})")
    return replace(
        sample,
        image=_resize_image(sample.image, height, width),
        mask=_resize_mask(sample.mask, height, width),
    )


def _fit_axis(array: np.ndarray, axis: int, side: int) -> np.ndarray:
    size = array.shape[axis]
    if size > side:
        start = (size - side) // 2
        return np.take(array, np.arange(start, start + side), axis=axis)
    if size < side:
        before = (side - size) // 2
        pad = [(0, 0)] * array.ndim
        pad[axis] = (before, side - size - before)
        return np.pad(array, pad)
    return array


def crop_pad_square(sample: Sample, side: int) -> Sample:
    """Centre-crop or zero-pad each spatial axis to ``side``; the extra pixel goes bottom/right."""
    if side < 1:
        raise ConfigurationError(f"side must be positive, got {side}")
    image, mask = sample.image, sample.mask
    for axis in (0, 1):
        image = _fit_axis(image, axis, side)
        mask = _fit_axis(mask, axis, side)
    return replace(sample, image=image, mask=mask)


def preprocess(sample: Sample, preset: RegimePreset) -> Sample:
    if preset.resize is not None:
        sample = resize_bilinear(sample, *preset.resize)
    if preset.square is not None:
        sample = crop_pad_square(sample, preset.square)
    return sample


@dataclass
class PatchSet:
    """Lazily materialised square patches: source image index plus top-left origin."""

    sources: list[Sample]
    image_index: np.ndarray
    origins: np.ndarray
    size: int

    def __len__(self) -> int:
        return len(self.image_index)

    def __getitem__(self, index: int) -> Sample:
        source = self.sources[int(self.image_index[index])]
        row, col = (int(v) for v in self.origins[index])
        window = (slice(row, row + self.size), slice(col, col + self.size))
        return Sample(source.image[window], source.mask[window], source.source_id, (row, col))

    def subset(self, indices: np.ndarray | slice) -> PatchSet:
        return PatchSet(self.sources, self.image_index[indices], self.origins[indices], self.size)

    def split_tail(self, fraction: float) -> tuple[PatchSet, PatchSet]:
        n_val = int(len(self) * fraction)
        cut = len(self) - n_val
        return self.subset(slice(0, cut)), self.subset(slice(cut, len(self)))


def extract_patches(samples: Sequence[Sample], size: int, count: int, seed: int) -> PatchSet:
    """Uniform patch origins: image drawn uniformly, origin uniform inside that image."""
    if count < 1:
        raise ConfigurationError(f"patch count must be >= 1, got {count}")
    if not samples:
        raise DataError("no samples to extract patches from")
    heights = np.array([s.height for s in samples])
    widths = np.array([s.width for s in samples])
    if size < 1 or size > heights.min() or size > widths.min():
        raise DimensionError(
            f"patch size {size} does not fit the smallest image ({heights.min()}, {widths.min()})"
        )
    rng = np.random.default_rng(seed)
    image_index = rng.integers(0, len(samples), size=count)
    rows = np.floor(rng.random(count) * (heights[image_index] - size + 1)).astype(np.int64)
    cols = np.floor(rng.random(count) * (widths[image_index] - size + 1)).astype(np.int64)
    return PatchSet(list(samples), image_index, np.stack([rows, cols], axis=1), size)


def grid_origins(height: int, width: int, size: int, stride: int) -> np.ndarray:
    """Dense top-left origins covering the canvas, including the last row/column."""
    if size > height or size > width:
        raise DimensionError(f"patch size {size} exceeds canvas ({height}, {width})")

    def axis(length: int) -> list[int]:
        starts = list(range(0, length - size + 1, stride))
        if starts[-1] != length - size:
            starts.append(length - size)
        return starts

    return np.array([(r, c) for r in axis(height) for c in axis(width)], dtype=np.int64)


def reconstruct_from_patches(predictions: np.ndarray, origins: np.ndarray, canvas: tuple[int, int]) -> np.ndarray:
    """Per-pixel mean of overlapping patch predictions; uncovered pixels are 0."""
    height, width = canvas
    n, size, _, channels = predictions.shape
    total = np.zeros((height, width, channels), dtype=np.float64)
    hits = np.zeros((height, width, 1), dtype=np.float64)
    for patch, (row, col) in zip(predictions, origins):
        if row < 0 or col < 0 or row + size > height or col + size > width:
            raise DimensionError(f"patch at ({row}, {col}) of size {size} lies outside canvas {canvas}")
        total[row : row + size, col : col + size] += patch
        hits[row : row + size, col : col + size] += 1
    return np.divide(total, hits, out=np.zeros_like(total), where=hits > 0)


@dataclass(frozen=True)
class AugmentConfig:
    max_shift: float = 0.1
    max_crop: float = 0.1
    contrast: float = 0.2
    brightness: float = 0.1
    hue: float = 0.05


@dataclass(frozen=True)
class AugmentParams:
    quarter_turns: int = 0
    flip_horizontal: bool = False
    flip_vertical: bool = False
    crop: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # top, bottom, left, right fractions
    shift: tuple[float, float] = (0.0, 0.0)  # rows, cols as fractions of the size
    contrast: float = 1.0
    brightness: float = 0.0
    hue: float = 0.0


def draw_augmentation(rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> AugmentParams:
    return AugmentParams(
        quarter_turns=int(rng.integers(0, 4)),
        flip_horizontal=bool(rng.random() < 0.5),
        flip_vertical=bool(rng.random() < 0.5),
        crop=tuple(float(v) for v in rng.uniform(0.0, config.max_crop / 2, size=4)),  # type: ignore[arg-type]
        shift=tuple(float(v) for v in rng.uniform(-config.max_shift, config.max_shift, size=2)),  # type: ignore[arg-type]
        contrast=float(rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)),
        brightness=float(rng.uniform(-config.brightness, config.brightness)),
        hue=float(rng.uniform(-config.hue, config.hue)),
    )


def _shift(array: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros_like(array)
    h, w = array.shape[:2]
    if abs(rows) >= h or abs(cols) >= w:
        return out
    src_r = slice(max(0, -rows), h - max(0, rows))
    dst_r = slice(max(0, rows), h - max(0, -rows))
    src_c = slice(max(0, -cols), w - max(0, cols))
    dst_c = slice(max(0, cols), w - max(0, -cols))
    out[dst_r, dst_c] = array[src_r, src_c]
    return out


# YIQ basis: hue rotation is a rotation of the (I, Q) plane.
_RGB_TO_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def _rotate_hue(image: np.ndarray, turns: float) -> np.ndarray:
    angle = 2.0 * np.pi * turns
    cos, sin = np.cos(angle), np.sin(angle)
    rotation = np.array([[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]])
    transform = _YIQ_TO_RGB @ rotation @ _RGB_TO_YIQ
    return image @ transform.T


def apply_augmentation(sample: Sample, params: AugmentParams) -> Sample:
    """Geometric ops hit image and mask alike; photometric ops hit the image only."""
    image = sample.image.astype(np.float32)
    mask = sample.mask
    h, w = image.shape[:2]

    turns = params.quarter_turns % 4
    if h != w and turns % 2:
        turns = (turns + 1) % 4  # keep non-square shapes: odd turns become 0 or 180 degrees
    if turns:
        image = np.rot90(image, turns, axes=(0, 1))
        mask = np.rot90(mask, turns, axes=(0, 1))
    if params.flip_horizontal:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if params.flip_vertical:
        image, mask = image[::-1], mask[::-1]

    top, bottom, left, right = (int(round(f * n)) for f, n in zip(params.crop, (h, h, w, w)))
    if top or bottom or left or right:
        image = _resize_image(image[top : h - bottom, left : w - right], h, w)
        mask = _resize_mask(mask[top : h - bottom, left : w - right], h, w)

    rows, cols = int(round(params.shift[0] * h)), int(round(params.shift[1] * w))
    if rows or cols:
        image, mask = _shift(image, rows, cols), _shift(mask, rows, cols)

    if params.contrast != 1.0:
        mean = image.mean(axis=(0, 1), keepdims=True)
        image = (image - mean) * params.contrast + mean
    if params.brightness:
        image = image + params.brightness
    if params.hue and image.shape[-1] == 3:
        image = _rotate_hue(image, params.hue)

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = (np.ascontiguousarray(mask) > 0).astype(np.uint8)
    return replace(sample, image=np.ascontiguousarray(image), mask=mask)


def augment(sample: Sample, seed: int | Sequence[int], config: AugmentConfig = AugmentConfig()) -> Sample:
    return apply_augmentation(sample, draw_augmentation(np.random.default_rng(seed), config))


def compute_channel_stats(samples: Sequence[Sample]) -> ChannelStats:
    if not samples:
        raise DataError("cannot compute normalisation statistics from an empty split")
    channels = samples[0].image.shape[-1]
    total = np.zeros(channels)
    squares = np.zeros(channels)
    count = 0
    for sample in samples:
        pixels = sample.image.reshape(-1, channels).astype(np.float64)
        total += pixels.sum(axis=0)
        squares += (pixels**2).sum(axis=0)
        count += pixels.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(squares / count - mean**2, 0.0))
    return ChannelStats(mean, std)


def normalize(sample: Sample, stats: ChannelStats) -> Sample:
    for channel, std in enumerate(stats.std):
        if std == 0:
            raise DataError(f"channel {channel} has zero standard deviation")
    image = (sample.image - stats.mean) / stats.std
    return replace(sample, image=image.astype(np.float32))


def split_dataset(ids: Sequence[str], ratios: Sequence[float], seed: int) -> SplitManifest:
    """Shuffled train/val/test partition of source ids.

    Train and val get ``floor(n * ratio)`` ids (train at least one), test
    gets the remainder.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three non-negative values summing to 1, got {tuple(ratios)}")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    if n >= 1:
        n_train = max(1, n_train)
    n_val = min(int(np.floor(n * ratios[1] + 1e-9)), n - n_train)
    return SplitManifest(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        seed=seed,
    )


def sample_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, index])


def make_batch(
    dataset: Sequence[Sample],
    indices: Sequence[int],
    stats: ChannelStats,
    augment_config: AugmentConfig | None = None,
    seeds: Sequence[np.random.SeedSequence] | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:

    def prepare(slot: int) -> Sample:
        sample = dataset[int(indices[slot])]
        if augment_config is not None and seeds is not None:
            sample = augment(sample, seeds[slot], augment_config)  # type: ignore[arg-type]
        return normalize(sample, stats)

    prepared = _map_ordered(prepare, range(len(indices)), threads)
    images = np.stack([s.image for s in prepared]).astype(np.float32)
    masks = np.stack([s.mask for s in prepared]).astype(np.float32)
    return images, masks


def _map_ordered(fn: Callable[[int], Sample], items: range, threads: int) -> list[Sample]:
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _split_path(cache_dir: Path, split: str) -> Path:
    return cache_dir / f"{split}.npz"


def save_split(cache_dir: Path, split: str, samples: Sequence[Sample]) -> Path:
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = _split_path(cache_dir, split)
    if samples:
        images = np.stack([np.round(s.image * 255.0) for s in samples]).astype(np.uint8)
        masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    else:
        images = np.zeros((0, 1, 1, 1), dtype=np.uint8)
        masks = np.zeros((0, 1, 1, 1), dtype=np.uint8)
    np.savez(path, images=images, masks=masks, ids=np.array([s.source_id for s in samples], dtype=str))
    return path


def load_split(cache_dir: Path, split: str) -> list[Sample]:
    path = _split_path(cache_dir, split)
    if not path.is_file():
        raise DataError(f"prepared split not found: {path}; run `mixseg prepare` first")
    with np.load(path) as archive:
        images = archive["images"].astype(np.float32) / 255.0
        masks = archive["masks"]
        ids = [str(i) for i in archive["ids"]]
    return [Sample(image, mask, source_id) for image, mask, source_id in zip(images, masks, ids)]


def save_stats(cache_dir: Path, stats: ChannelStats) -> Path:
    path = cache_dir / STATS_FILE
    path.write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_stats(cache_dir: Path) -> ChannelStats:
    path = cache_dir / STATS_FILE
    if not path.is_file():
        raise DataError(f"normalisation statistics not found: {path}; run `mixseg prepare` first")
    return ChannelStats.from_dict(json.loads(path.read_text(encoding="utf-8")))


def save_patch_index(cache_dir: Path, name: str, patches: PatchSet) -> Path:
    path = cache_dir / f"{name}_patches.npz"
    np.savez(path, image_index=patches.image_index, origins=patches.origins, size=np.array(patches.size))
    return path


def load_patch_index(cache_dir: Path, name: str, sources: list[Sample]) -> PatchSet:
    path = cache_dir / f"{name}_patches.npz"
    if not path.is_file():
        raise DataError(f"patch index not found: {path}; run `mixseg prepare` first")
    with np.load(path) as archive:
        return PatchSet(sources, archive["image_index"], archive["origins"], int(archive["size"]))
