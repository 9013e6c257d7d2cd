from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

from mixseg.nn.architectures import ArchitectureSpec
from mixseg.services.data_pipeline import Sample


def blob_pair(size: tuple[int, int], seed: int, mode: str = "L") -> tuple[Image.Image, Image.Image]:
    """Bright ellipses on a dark noisy background plus their exact mask."""
    rng = np.random.default_rng(seed)
    width, height = size
    mask = Image.new("L", size, 0)
    draw = ImageDraw.Draw(mask)
    for _ in range(2):
        cx, cy = rng.integers(0, width), rng.integers(0, height)
        rx, ry = rng.integers(3, max(4, width // 4)), rng.integers(3, max(4, height // 4))
        draw.ellipse((cx - rx, cy - ry, cx + rx, cy + ry), fill=255)
    pixels = np.asarray(mask, dtype=np.float64) * 0.6 + rng.uniform(0, 60, size=(height, width))
    gray = Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8))
    image = gray.convert("RGB") if mode == "RGB" else gray
    return image, mask


def write_pairs(directory: Path, count: int, size: tuple[int, int], mode: str = "L", seed: int = 0) -> list[str]:
    directory.mkdir(parents=True, exist_ok=True)
    stems = []
    for index in range(count):
        stem = f"case{index:03d}"
        image, mask = blob_pair(size, seed + index, mode)
        image.save(directory / f"{stem}.png")
        mask.save(directory / f"{stem}_mask.png")
        stems.append(stem)
    return stems


def random_sample(rng: np.random.Generator, height: int, width: int, channels: int = 1, source_id: str = "s") -> Sample:
    image = rng.uniform(0.0, 1.0, size=(height, width, channels)).astype(np.float32)
    mask = (rng.random((height, width, 1)) < 0.3).astype(np.uint8)
    return Sample(image, mask, source_id)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def gray_dir(tmp_path: Path) -> Path:
    directory = tmp_path / "gray"
    write_pairs(directory, count=6, size=(40, 32), mode="L")
    return directory


@pytest.fixture
def rgb_dir(tmp_path: Path) -> Path:
    directory = tmp_path / "rgb"
    write_pairs(directory, count=10, size=(52, 40), mode="RGB")
    return directory


@pytest.fixture
def tiny_spec() -> ArchitectureSpec:
    return ArchitectureSpec(variant="unet", mix=True, depth=3, base_width=4, kernel_sizes=(1, 3))


@pytest.fixture
def ledger_path(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    path = tmp_path / "ledger" / "runs.db"
    monkeypatch.setenv("MIXSEG_LEDGER", str(path))
    return path
