"""U-Net, R2U-Net and Attention U-Net, each with an optional mix variant."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from pydantic import Field, field_validator, model_validator

from ..errors import DimensionError
from ..schemas import StrictModel
from .blocks import (
    DEFAULT_MIX_KERNELS,
    PLAIN_KERNELS,
    AttentionGateParams,
    BlockKind,
    BlockParams,
    BlockSpec,
    ConvLayer,
    MixStage,
    ParameterGroup,
    attention_gate,
    build_attention_gate,
    build_block,
    build_stage,
    check_kernel_sizes,
    kaiming_conv,
)
from .tensor_autograd import Tensor, concat_channels, max_pool2, sigmoid, upsample2_nearest


class Variant(str, Enum):
    unet = "unet"
    r2unet = "r2unet"
    attunet = "attunet"


DISPLAY_NAMES = {
    Variant.unet: "U-Net",
    Variant.r2unet: "R2U-Net",
    Variant.attunet: "AttU-Net",
}


class ArchitectureSpec(StrictModel):
    """Network-level description: variant, mix flag, depth and widths."""

    variant: Variant = Field(Variant.unet, description="unet, r2unet or attunet")
    mix: bool = Field(False, description="Swap every block for its mix counterpart")
    depth: int = Field(5, ge=2, description="Encoder levels including the bottleneck")
    base_width: int = Field(64, ge=1, description="Channels of the first level")
    in_channels: int = Field(1, ge=1)
    out_channels: int = Field(1, ge=1)
    kernel_sizes: tuple[int, ...] = Field(DEFAULT_MIX_KERNELS, description="Mix kernel sizes")
    recurrence_steps: int = Field(2, ge=0, description="t for recurrent blocks")
    norm_per_branch: bool = Field(False, description="Batch-norm each mix branch before concatenation")

    @field_validator("kernel_sizes", mode="before")
    @classmethod
    def _parse_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("kernel_sizes")
    @classmethod
    def _odd_ascending(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        return check_kernel_sizes(value)

    @model_validator(mode="after")
    def _width_covers_kernels(self) -> ArchitectureSpec:
        if self.mix and self.base_width < len(self.kernel_sizes):
            raise ValueError(
                f"base_width {self.base_width} must be >= the number of kernel_sizes ({len(self.kernel_sizes)})"
            )
        return self

    @property
    def display_name(self) -> str:
        name = DISPLAY_NAMES[self.variant]
        return f"Mix{name}" if self.mix else name

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**level for level in range(self.depth)]

    @property
    def block_kind(self) -> BlockKind:
        if self.variant is Variant.r2unet:
            return BlockKind.mix_recurrent if self.mix else BlockKind.recurrent
        return BlockKind.mix_conv if self.mix else BlockKind.conv

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def block_spec(self, in_channels: int, out_channels: int) -> BlockSpec:
        return BlockSpec.create(
            kind=self.block_kind,
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_sizes=self.kernel_sizes if self.mix else PLAIN_KERNELS,
            recurrence_steps=self.recurrence_steps,
            norm_per_branch=self.norm_per_branch,
        )


@dataclass
class DecoderLevel(ParameterGroup):
    """Upsample + 3x3 conv halving channels, optional gate, then the level block."""

    up: MixStage
    gate: AttentionGateParams | None
    block: BlockParams


@dataclass
class Network(ParameterGroup):
    encoder: list[BlockParams]
    bottleneck: BlockParams
    decoder: list[DecoderLevel]
    head: ConvLayer
    spec: ArchitectureSpec

    @property
    def skip_wiring(self) -> list[tuple[int, int]]:
        """(encoder level, decoder level) pairs joined by skip connections."""
        return [(level, level) for level in range(len(self.encoder))]

    @property
    def gate_count(self) -> int:
        return sum(1 for level in self.decoder if level.gate is not None)

    def __call__(self, batch: Tensor, training: bool = False) -> Tensor:
        return forward(self, batch, training)


def build_network(spec: ArchitectureSpec, seed: int = 0, dtype: Any = np.float32) -> Network:
    """Deterministically build and initialise the network described by ``spec``."""
    rng = np.random.default_rng(seed)
    widths = spec.widths
    encoder = []
    channels = spec.in_channels
    for width in widths[:-1]:
        encoder.append(build_block(spec.block_spec(channels, width), rng, dtype))
        channels = width
    bottleneck = build_block(spec.block_spec(channels, widths[-1]), rng, dtype)

    decoder: list[DecoderLevel | None] = [None] * (spec.depth - 1)
    for level in reversed(range(spec.depth - 1)):
        width = widths[level]
        up = build_stage(widths[level + 1], PLAIN_KERNELS, [width], rng, dtype=dtype)
        gate = None
        if spec.variant is Variant.attunet:
            gate = build_attention_gate(width, width, rng, dtype=dtype)
        block = build_block(spec.block_spec(2 * width, width), rng, dtype)
        decoder[level] = DecoderLevel(up, gate, block)

    head = kaiming_conv(rng, 1, widths[0], spec.out_channels, dtype)
    return Network(encoder, bottleneck, decoder, head, spec)  # type: ignore[arg-type]


def check_input_shape(spec: ArchitectureSpec, shape: tuple[int, ...]) -> None:
    if len(shape) != 4:
        raise DimensionError(f"forward expects a (b, h, w, c) batch, got shape {shape}")
    _, h, w, c = shape
    if c != spec.in_channels:
        raise DimensionError(f"batch has {c} channels but the network expects {spec.in_channels}")
    multiple = spec.spatial_multiple
    if h % multiple or w % multiple:
        pad_h = -h % multiple
        pad_w = -w % multiple
        raise DimensionError(
            f"spatial dims ({h}, {w}) must be divisible by {multiple} for depth {spec.depth}; "
            f"pad by ({pad_h}, {pad_w}) to ({h + pad_h}, {w + pad_w})"
        )


def forward(net: Network, batch: Tensor, training: bool = False) -> Tensor:
    """Run ``batch`` (b, h, w, c) through the network; output is (b, h, w, out_channels) in (0, 1)."""
    check_input_shape(net.spec, batch.shape)
    skips = []
    x = batch
    for block in net.encoder:
        x = block(x, training)
        skips.append(x)
        x = max_pool2(x)
    x = net.bottleneck(x, training)

    for encoder_level, decoder_level in reversed(net.skip_wiring):
        level = net.decoder[decoder_level]
        d = level.up(upsample2_nearest(x), training)
        skip = skips[encoder_level]
        if level.gate is not None:
            skip = attention_gate(d, skip, level.gate)
        x = level.block(concat_channels([skip, d]), training)
    return sigmoid(net.head(x))


def parameter_count(net: Network) -> int:
    """Scalar parameters, including batch-norm gamma/beta (running stats excluded)."""
    return net.parameter_count()
