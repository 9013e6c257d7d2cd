"""Conv, recurrent, mix and attention blocks built on :mod:`tensor_autograd`.

A *stage* is ``n`` parallel same-padded convolutions with ascending kernel
sizes whose outputs are concatenated along channels, followed by batch norm
and ReLU. A plain stage is the ``n = 1``, ``k = 3`` case, so every plain
block is literally the mix block with ``kernel_sizes = (3,)``.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any

import numpy as np
from pydantic import Field, field_validator, model_validator

from ..errors import ConfigurationError, DimensionError
from ..schemas import StrictModel
from .tensor_autograd import (
    RunningStats,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d_same,
    mul,
    relu,
    sigmoid,
)

DEFAULT_MIX_KERNELS = (1, 3, 5, 7)
PLAIN_KERNELS = (3,)


class BlockKind(str, Enum):
    conv = "conv"
    recurrent = "recurrent"
    mix_conv = "mix_conv"
    mix_recurrent = "mix_recurrent"

    @property
    def is_mix(self) -> bool:
        return self in (BlockKind.mix_conv, BlockKind.mix_recurrent)

    @property
    def is_recurrent(self) -> bool:
        return self in (BlockKind.recurrent, BlockKind.mix_recurrent)


def split_filters(total: int, kernel_sizes: Sequence[int]) -> list[int]:
    """Split ``total`` filters over kernels; the remainder goes to the smallest kernels."""
    n = len(kernel_sizes)
    if n == 0 or total < n:
        raise ConfigurationError(f"cannot split {total} filters over {n} kernel sizes")
    share, remainder = divmod(total, n)
    order = sorted(range(n), key=lambda i: kernel_sizes[i])
    counts = [share] * n
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def check_kernel_sizes(value: tuple[int, ...]) -> tuple[int, ...]:
    if not value:
        raise ValueError("kernel_sizes must not be empty")
    if any(k < 1 or k % 2 == 0 for k in value):
        raise ValueError(f"kernel sizes must be odd and >= 1, got {value}")
    if any(a >= b for a, b in zip(value, value[1:])):
        raise ValueError(f"kernel sizes must be strictly increasing, got {value}")
    return value


def closed_form_conv_count(in_channels: int, kernel_sizes: Sequence[int], filters: Sequence[int]) -> int:
    """Weights plus biases of one stage: sum of m_i * k_i^2 * c_in + m_i."""
    return sum(m * k * k * in_channels + m for k, m in zip(kernel_sizes, filters))


class BlockSpec(StrictModel):
    kind: BlockKind
    in_channels: int = Field(..., ge=1, description="Channels of the block input")
    out_channels: int = Field(..., ge=1, description="Output channels M")
    kernel_sizes: tuple[int, ...] = Field(PLAIN_KERNELS, description="Ascending odd kernel sizes")
    recurrence_steps: int = Field(2, ge=0, description="Recurrent steps t; each layer applies its stage t + 1 times")
    filter_counts: tuple[int, ...] | None = Field(None, description="Per-kernel filters m_i; equal split if omitted")
    norm_per_branch: bool = Field(False, description="Batch-norm each branch before concatenation")

    @field_validator("kernel_sizes")
    @classmethod
    def _odd_ascending(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        return check_kernel_sizes(value)

    @model_validator(mode="after")
    def _consistent(self) -> BlockSpec:
        if not self.kind.is_mix and self.kernel_sizes != PLAIN_KERNELS:
            raise ValueError(f"{self.kind.value} blocks use kernel_sizes (3,), got {self.kernel_sizes}")
        if self.filter_counts is not None:
            if len(self.filter_counts) != len(self.kernel_sizes):
                raise ValueError("filter_counts must have one entry per kernel size")
            if sum(self.filter_counts) != self.out_channels or min(self.filter_counts) < 1:
                raise ValueError(f"filter_counts {self.filter_counts} must be positive and sum to {self.out_channels}")
        elif self.out_channels < len(self.kernel_sizes):
            raise ValueError(f"out_channels {self.out_channels} is smaller than the kernel count")
        return self

    @property
    def filters(self) -> list[int]:
        if self.filter_counts is not None:
            return list(self.filter_counts)
        return split_filters(self.out_channels, self.kernel_sizes)


class ParameterGroup:
    """Mixin for dataclasses holding tensors, running stats and nested groups."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in _walk(self, prefix.rstrip(".")):
            if isinstance(value, Tensor):
                yield name, value

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in _walk(self, prefix.rstrip(".")):
            if isinstance(value, RunningStats):
                yield f"{name}.running_mean", value.mean
                yield f"{name}.running_var", value.var

    def parameter_count(self) -> int:
        return sum(tensor.size for _, tensor in self.named_parameters())


def _walk(value: Any, name: str) -> Iterator[tuple[str, Any]]:
    def join(suffix: str) -> str:
        return f"{name}.{suffix}" if name else suffix

    if isinstance(value, (Tensor, RunningStats)):
        yield name, value
    elif isinstance(value, ParameterGroup):
        for f in fields(value):  # type: ignore[arg-type]
            yield from _walk(getattr(value, f.name), join(f.name))
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk(item, join(str(index)))


@dataclass
class ConvLayer(ParameterGroup):
    kernel: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_same(x, self.kernel, self.bias)

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]


@dataclass
class NormLayer(ParameterGroup):
    gamma: Tensor
    beta: Tensor
    stats: RunningStats

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, training=training)


@dataclass
class MixStage(ParameterGroup):
    """Parallel convolutions, concatenated in ascending kernel order, then BN -> ReLU."""

    branches: list[ConvLayer]
    norms: list[NormLayer]

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        if len(self.norms) == 1:
            outputs = [branch(x) for branch in self.branches]
            y = outputs[0] if len(outputs) == 1 else concat_channels(outputs)
            return relu(self.norms[0](y, training))
        outputs = [norm(branch(x), training) for branch, norm in zip(self.branches, self.norms)]
        return relu(concat_channels(outputs))

    @property
    def in_channels(self) -> int:
        return self.branches[0].kernel.shape[2]


@dataclass
class BlockParams(ParameterGroup):
    """Parameters of one block: two stages, plus a 1x1 shortcut for recurrent kinds."""

    stages: list[MixStage]
    shortcut: ConvLayer | None
    spec: BlockSpec

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return block_forward(x, self, training)


@dataclass
class AttentionGateParams(ParameterGroup):
    w_g: ConvLayer
    w_x: ConvLayer
    psi: ConvLayer


def kaiming_conv(rng: np.random.Generator, k: int, c_in: int, m: int, dtype: Any = np.float32) -> ConvLayer:
    std = math.sqrt(2.0 / (k * k * c_in))
    kernel = rng.normal(0.0, std, size=(k, k, c_in, m)).astype(dtype)
    return ConvLayer(Tensor(kernel, requires_grad=True), Tensor(np.zeros(m, dtype=dtype), requires_grad=True))


def _norm(channels: int, dtype: Any) -> NormLayer:
    return NormLayer(
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        RunningStats.fresh(channels, dtype),
    )


def build_stage(
    in_channels: int,
    kernel_sizes: Sequence[int],
    filters: Sequence[int],
    rng: np.random.Generator,
    norm_per_branch: bool = False,
    dtype: Any = np.float32,
) -> MixStage:
    branches = [kaiming_conv(rng, k, in_channels, m, dtype) for k, m in zip(kernel_sizes, filters)]
    if norm_per_branch:
        norms = [_norm(m, dtype) for m in filters]
    else:
        norms = [_norm(sum(filters), dtype)]
    return MixStage(branches, norms)


def build_block(spec: BlockSpec, rng: np.random.Generator, dtype: Any = np.float32) -> BlockParams:
    filters = spec.filters
    m = spec.out_channels
    shortcut = None
    if spec.kind.is_recurrent:
        shortcut = kaiming_conv(rng, 1, spec.in_channels, m, dtype)
        first_in = m
    else:
        first_in = spec.in_channels
    stages = [
        build_stage(first_in, spec.kernel_sizes, filters, rng, spec.norm_per_branch, dtype),
        build_stage(m, spec.kernel_sizes, filters, rng, spec.norm_per_branch, dtype),
    ]
    return BlockParams(stages, shortcut, spec)


def build_attention_gate(
    gating_channels: int,
    skip_channels: int,
    rng: np.random.Generator,
    inter_channels: int | None = None,
    dtype: Any = np.float32,
) -> AttentionGateParams:
    inter = inter_channels if inter_channels is not None else max(1, skip_channels // 2)
    return AttentionGateParams(
        w_g=kaiming_conv(rng, 1, gating_channels, inter, dtype),
        w_x=kaiming_conv(rng, 1, skip_channels, inter, dtype),
        psi=kaiming_conv(rng, 1, inter, 1, dtype),
    )


def _check_input(x: Tensor, params: BlockParams) -> None:
    if x.shape[-1] != params.spec.in_channels:
        raise DimensionError(
            f"{params.spec.kind.value} block expects {params.spec.in_channels} input channels, got shape {x.shape}"
        )


def _double_stage(x: Tensor, params: BlockParams, training: bool) -> Tensor:
    _check_input(x, params)
    first, second = params.stages
    return second(first(x, training), training)


def _recurrent_layer(x: Tensor, stage: MixStage, t: int, training: bool) -> Tensor:
    h = stage(x, training)
    for _ in range(t):
        h = stage(add(x, h), training)
    return h


def _recurrent(x: Tensor, params: BlockParams, t: int | None, training: bool) -> Tensor:
    _check_input(x, params)
    steps = params.spec.recurrence_steps if t is None else t
    if steps < 0:
        raise ConfigurationError(f"recurrence steps must be >= 0, got {steps}")
    base = params.shortcut(x)
    h = base
    for stage in params.stages:
        h = _recurrent_layer(h, stage, steps, training)
    return add(base, h)


def conv_block(x: Tensor, params: BlockParams, training: bool = True) -> Tensor:
    return _double_stage(x, params, training)


def mix_conv_block(x: Tensor, params: BlockParams, training: bool = True) -> Tensor:
    return _double_stage(x, params, training)


def recurrent_conv_block(x: Tensor, params: BlockParams, t: int | None = None, training: bool = True) -> Tensor:
    """1x1 projection, two recurrent layers, residual add.

    A recurrent layer computes h_0 = f(x) and h_s = f(x + h_{s-1}) for
    s = 1..t with one shared conv/BN/ReLU stage f, so t = 0 is the plain path.
    """
    return _recurrent(x, params, t, training)


def mix_recurrent_block(x: Tensor, params: BlockParams, t: int | None = None, training: bool = True) -> Tensor:
    return _recurrent(x, params, t, training)


def block_forward(x: Tensor, params: BlockParams, training: bool = True) -> Tensor:
    kind = params.spec.kind
    if kind is BlockKind.conv:
        return conv_block(x, params, training)
    if kind is BlockKind.mix_conv:
        return mix_conv_block(x, params, training)
    if kind is BlockKind.recurrent:
        return recurrent_conv_block(x, params, training=training)
    return mix_recurrent_block(x, params, training=training)


def attention_gate(g: Tensor, x: Tensor, params: AttentionGateParams) -> Tensor:
    """Additive gate: x * sigmoid(psi(relu(W_g g + W_x x))), coefficient broadcast over channels."""
    if g.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"attention gate spatial mismatch: gating {g.shape} vs skip {x.shape}")
    alpha = sigmoid(params.psi(relu(add(params.w_g(g), params.w_x(x)))))
    return mul(alpha, x)
