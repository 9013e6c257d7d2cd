"""Binary checkpoint files.

Layout::

    b"MIXSEG01"
    uint32 header length, then UTF-8 JSON header
    uint32 tensor count, then per tensor:
        uint16 name length, UTF-8 name, uint8 ndim, uint32 dims..., float32 values

All integers and values are little-endian. The JSON header is written with
sorted keys, so identical states produce identical bytes.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from ..errors import CheckpointError
from ..nn.architectures import ArchitectureSpec, Network
from ..schemas import describe_validation_error
from .data_pipeline import ChannelStats

logger = logging.getLogger("mixseg.checkpoint")

MAGIC = b"MIXSEG01"
FORMAT_VERSION = 1
VALUE_DTYPE = np.dtype("<f4")

PARAM_PREFIX = "param:"
BUFFER_PREFIX = "buffer:"
MOMENT1_PREFIX = "adam_m:"
MOMENT2_PREFIX = "adam_v:"


class ScheduleHeader(BaseModel):
    lr: float
    best_loss: float | None = Field(None, description="None until the first epoch finishes")
    epochs_since_improvement: int = 0
    patience: int = 10
    factor: float = 0.1


class OptimizerHeader(BaseModel):
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class CheckpointHeader(BaseModel):
    format_version: int = Field(FORMAT_VERSION, description="Bumped on incompatible layout changes")
    architecture: ArchitectureSpec
    epoch: int = Field(0, ge=0, description="Last completed epoch (1-based), 0 before training")
    seed: int = 0
    rng_state: dict[str, Any] | None = Field(None, description="numpy bit-generator state after the epoch")
    schedule: ScheduleHeader | None = None
    optimizer: OptimizerHeader | None = None
    normalization: dict[str, list[float]] | None = None
    best_f1: float | None = None


@dataclass
class Checkpoint:
    header: CheckpointHeader
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def spec(self) -> ArchitectureSpec:
        return self.header.architecture

    @property
    def stats(self) -> ChannelStats | None:
        if self.header.normalization is None:
            return None
        return ChannelStats.from_dict(self.header.normalization)

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {name[len(prefix) :]: value for name, value in self.tensors.items() if name.startswith(prefix)}


def network_tensors(net: Network) -> dict[str, np.ndarray]:
    tensors = {PARAM_PREFIX + name: tensor.data for name, tensor in net.named_parameters()}
    tensors.update({BUFFER_PREFIX + name: buffer for name, buffer in net.named_buffers()})
    return tensors


def _write_tensor(handle: BinaryIO, name: str, value: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(value, dtype=VALUE_DTYPE)
    handle.write(struct.pack("<H", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<B", array.ndim))
    handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
    handle.write(array.tobytes())


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write atomically: a temporary sibling is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(checkpoint.header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    partial = path.with_name(path.name + ".partial")
    with partial.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", len(header)))
        handle.write(header)
        handle.write(struct.pack("<I", len(checkpoint.tensors)))
        for name in sorted(checkpoint.tensors):
            _write_tensor(handle, name, checkpoint.tensors[name])
    os.replace(partial, path)
    logger.debug("Saved checkpoint %s (%d tensors)", path, len(checkpoint.tensors))
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path) -> None:
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"checkpoint {self.path} is truncated at byte {len(self.payload)}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a mixseg checkpoint (bad magic {magic!r})")
    (header_size,) = reader.unpack("<I")
    try:
        raw_header = json.loads(reader.take(header_size).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt header: {exc}") from exc
    version = raw_header.get("format_version") if isinstance(raw_header, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
    try:
        header = CheckpointHeader.model_validate(raw_header)
    except ValidationError as exc:
        raise CheckpointError(describe_validation_error(exc, f"checkpoint header in {path}")) from exc

    tensors: dict[str, np.ndarray] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_size,) = reader.unpack("<H")
        try:
            name = reader.take(name_size).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"checkpoint {path} has a corrupt tensor name at byte {reader.offset}: {exc}") from exc
        if name in tensors:
            raise CheckpointError(f"checkpoint {path} repeats tensor {name}")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(size * VALUE_DTYPE.itemsize), dtype=VALUE_DTYPE)
        tensors[name] = values.reshape(shape).astype(np.float32)
    if reader.offset != len(reader.payload):
        raise CheckpointError(f"checkpoint {path} has {len(reader.payload) - reader.offset} trailing bytes")
    return Checkpoint(header, tensors)


def restore_network(checkpoint: Checkpoint, net: Network) -> Network:
    """Copy parameters and running statistics into ``net``; specs must match."""
    if checkpoint.spec != net.spec:
        raise CheckpointError(
            f"checkpoint architecture {checkpoint.spec.display_name} {checkpoint.spec.model_dump()} "
            f"does not match network {net.spec.model_dump()}"
        )
    params = checkpoint.with_prefix(PARAM_PREFIX)
    buffers = checkpoint.with_prefix(BUFFER_PREFIX)
    for name, tensor in net.named_parameters():
        if name not in params or params[name].shape != tensor.shape:
            raise CheckpointError(f"checkpoint is missing parameter {name} with shape {tensor.shape}")
        tensor.data = params[name].astype(tensor.dtype).copy()
        tensor.grad = None
    for name, buffer in net.named_buffers():
        if name not in buffers or buffers[name].shape != buffer.shape:
            raise CheckpointError(f"checkpoint is missing buffer {name} with shape {buffer.shape}")
        buffer[...] = buffers[name]
    return net
