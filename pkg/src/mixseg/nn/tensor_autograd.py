"""Dense tensors, differentiable ops and reverse-mode gradients.

Images use channel-last layout ``(h, w, c)``; batched tensors prepend the
batch axis, ``(b, h, w, c)``. Every op accepts either form.

Ops run eagerly. When a :class:`Tape` is active and at least one input
requires a gradient, the op appends a record to the tape; :func:`backward`
walks those records in reverse. Without an active tape ops just compute
their forward value, which is how inference and finite differences run.
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError, NumericError

logger = logging.getLogger("mixseg.autograd")

BCE_CLAMP = 1e-7
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

_tensor_ids = itertools.count()
_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "id")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None, dtype: Any = None) -> None:
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_tensor_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return sum_all(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of differentiable ops; also fixes the graph precision.

    Use as a context manager. Records are appended in execution order, which
    is a topological order of the graph.
    """

    def __init__(self, dtype: Any = np.float32) -> None:
        self.dtype = np.dtype(dtype)
        if self.dtype.kind != "f":
            raise ConfigurationError(f"tape dtype must be floating point, got {self.dtype}")
        self.records: list[TapeRecord] = []
        self._produced: set[int] = set()

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.id in self._produced

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, saved: dict[str, Any]) -> None:
        self.records.append(TapeRecord(op, inputs, output, saved))
        self._produced.add(output.id)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


BackwardRule = Callable[[np.ndarray, TapeRecord], Sequence[np.ndarray | None]]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def backward_rule(op: str) -> Callable[[BackwardRule], BackwardRule]:
    def register(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[op] = fn
        return fn

    return register


def _as_tensor(value: Tensor | float | np.ndarray) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _data(tensor: Tensor) -> np.ndarray:
    tape = current_tape()
    if tape is None or tensor.data.dtype == tape.dtype:
        return tensor.data
    return tensor.data.astype(tape.dtype)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, **saved: Any) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values (output shape {out.shape})")
    tape = current_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires_grad)
    if requires_grad:
        tape.record(op, inputs, result, saved)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("add", (a, b), _data(a) + _data(b))


@backward_rule("add")
def _add_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray, np.ndarray]:
    a, b = record.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    x, y = _data(a), _data(b)
    return _emit("mul", (a, b), x * y, x=x, y=y)


@backward_rule("mul")
def _mul_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray, np.ndarray]:
    a, b = record.inputs
    x, y = record.saved["x"], record.saved["y"]
    return _unbroadcast(grad * y, a.shape), _unbroadcast(grad * x, b.shape)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.asarray(_data(x).sum()))


@backward_rule("sum")
def _sum_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray]:
    (x,) = record.inputs
    return (np.broadcast_to(grad, x.shape).copy(),)


def relu(x: Tensor) -> Tensor:
    data = _data(x)
    return _emit("relu", (x,), np.maximum(data, 0), mask=data > 0)


@backward_rule("relu")
def _relu_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray]:
    return (grad * record.saved["mask"],)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) for the graph dtype."""
    data = _data(x)
    lo = np.nextafter(data.dtype.type(0), data.dtype.type(1))
    hi = np.nextafter(data.dtype.type(1), data.dtype.type(0))
    probs = np.clip(0.5 * (1.0 + np.tanh(0.5 * data)), lo, hi)
    return _emit("sigmoid", (x,), probs, probs=probs)


@backward_rule("sigmoid")
def _sigmoid_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray]:
    probs = record.saved["probs"]
    return (grad * probs * (1.0 - probs),)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, h, w, c = x.shape
    if k == 1:
        return x.reshape(b * h * w, c)
    pad = k // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # (b, h, w, c, k, k)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    b, h, w, c = shape
    if k == 1:
        return cols.reshape(shape)
    pad = k // 2
    padded = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    blocks = cols.reshape(b, h, w, k, k, c)
    for i in range(k):
        for j in range(k):
            padded[:, i : i + h, j : j + w, :] += blocks[:, :, :, i, j, :]
    return padded[:, pad : pad + h, pad : pad + w, :]


def _check_kernel(x_shape: tuple[int, ...], kernel_shape: tuple[int, ...], bias_shape: tuple[int, ...] | None) -> int:
    if len(kernel_shape) != 4 or kernel_shape[0] != kernel_shape[1]:
        raise DimensionError(f"kernel must have shape (k, k, c_in, m), got {kernel_shape}")
    k, _, c_in, m = kernel_shape
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd and >= 1, got {k}")
    if len(x_shape) not in (3, 4):
        raise DimensionError(f"conv2d_same expects (h, w, c) or (b, h, w, c) input, got {x_shape}")
    if x_shape[-1] != c_in:
        raise DimensionError(f"input shape {x_shape} does not match kernel shape {kernel_shape}: channel dims differ")
    if bias_shape is not None and bias_shape != (m,):
        raise DimensionError(f"bias shape {bias_shape} does not match kernel shape {kernel_shape}")
    return k


def conv2d_same(input: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-channel convolution with zero "same" padding (im2col + matmul)."""
    k = _check_kernel(input.shape, kernel.shape, None if bias is None else bias.shape)
    x = _data(input)
    w = _data(kernel)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, h, width, c = x.shape
    m = w.shape[3]
    cols = _im2col(x, k)
    out = cols @ w.reshape(k * k * c, m)
    if bias is not None:
        out = out + _data(bias)
    out = out.reshape(b, h, width, m)
    if squeeze:
        out = out[0]
    inputs = (input, kernel) if bias is None else (input, kernel, bias)
    return _emit("conv2d_same", inputs, out, cols=cols, kernel=w, x_shape=x.shape, squeeze=squeeze)


@backward_rule("conv2d_same")
def _conv2d_same_backward(grad: np.ndarray, record: TapeRecord) -> list[np.ndarray]:
    cols = record.saved["cols"]
    w = record.saved["kernel"]
    k, _, c, m = w.shape
    flat = grad.reshape(-1, m)
    d_kernel = (cols.T @ flat).reshape(w.shape)
    d_input = _col2im(flat @ w.reshape(k * k * c, m).T, record.saved["x_shape"], k)
    if record.saved["squeeze"]:
        d_input = d_input[0]
    grads = [d_input, d_kernel]
    if len(record.inputs) == 3:
        grads.append(flat.sum(axis=0))
    return grads


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Nested-loop "same" convolution used as an oracle for :func:`conv2d_same`."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    k, _, c_in, m = kernel.shape
    pad = k // 2
    b, h, w, _ = x.shape
    out = np.zeros((b, h, w, m), dtype=np.result_type(x, kernel))
    for n in range(b):
        for row in range(h):
            for col in range(w):
                for i in range(k):
                    for j in range(k):
                        r, s = row + i - pad, col + j - pad
                        if 0 <= r < h and 0 <= s < w:
                            out[n, row, col] += x[n, r, s] @ kernel[i, j]
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_channels needs at least one part")
    lead = parts[0].shape[:-1]
    for part in parts[1:]:
        if part.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels spatial mismatch: {parts[0].shape} vs {part.shape}"
            )
    arrays = [_data(p) for p in parts]
    offsets = np.cumsum([0] + [a.shape[-1] for a in arrays]).tolist()
    return _emit("concat_channels", tuple(parts), np.concatenate(arrays, axis=-1), offsets=offsets)


@backward_rule("concat_channels")
def _concat_backward(grad: np.ndarray, record: TapeRecord) -> list[np.ndarray]:
    offsets = record.saved["offsets"]
    return [grad[..., start:stop] for start, stop in zip(offsets[:-1], offsets[1:])]


def _pool_axes(lead: int) -> list[int]:
    # (..., h2, a, w2, b, c) -> (..., h2, w2, c, a, b)
    return list(range(lead)) + [lead, lead + 2, lead + 4, lead + 1, lead + 3]


def max_pool2(input: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the first maximal element."""
    x = _data(input)
    if x.ndim < 3:
        raise DimensionError(f"max_pool2 expects (..., h, w, c), got {x.shape}")
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even height and width, got {x.shape}")
    windows = x.reshape(*lead, h // 2, 2, w // 2, 2, c).transpose(_pool_axes(len(lead)))
    windows = windows.reshape(*lead, h // 2, w // 2, c, 4)
    argmax = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, argmax, axis=-1)[..., 0]
    return _emit("max_pool2", (input,), out, argmax=argmax, x_shape=x.shape)


@backward_rule("max_pool2")
def _max_pool2_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray]:
    *lead, h, w, c = record.saved["x_shape"]
    scattered = np.zeros((*grad.shape, 4), dtype=grad.dtype)
    np.put_along_axis(scattered, record.saved["argmax"], grad[..., None], axis=-1)
    scattered = scattered.reshape(*lead, h // 2, w // 2, c, 2, 2)
    scattered = scattered.transpose(np.argsort(_pool_axes(len(lead))))
    return (scattered.reshape(record.saved["x_shape"]),)


def upsample2_nearest(input: Tensor) -> Tensor:
    x = _data(input)
    if x.ndim < 3:
        raise DimensionError(f"upsample2_nearest expects (..., h, w, c), got {x.shape}")
    return _emit("upsample2_nearest", (input,), x.repeat(2, axis=-3).repeat(2, axis=-2))


@backward_rule("upsample2_nearest")
def _upsample_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray]:
    *lead, h, w, c = record.inputs[0].shape
    return (grad.reshape(*lead, h, 2, w, 2, c).sum(axis=(-4, -2)),)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype: Any = np.float32) -> RunningStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningStats,
    training: bool = True,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    x = _data(input)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batch_norm gamma/beta shapes {gamma.shape}/{beta.shape} do not match {channels} channels"
        )
    axes = tuple(range(x.ndim - 1))
    count = x.size // channels if channels else 0
    if count == 0:
        raise DimensionError(f"batch_norm got a zero-size batch {x.shape}")
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.mean[...] = (1 - momentum) * state.mean + momentum * mean
        state.var[...] = (1 - momentum) * state.var + momentum * unbiased
    else:
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    g = _data(gamma)
    out = g * x_hat + _data(beta)
    return _emit(
        "batch_norm", (input, gamma, beta), out,
        x_hat=x_hat, inv_std=inv_std, gamma=g, training=training, count=count,
    )


@backward_rule("batch_norm")
def _batch_norm_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat = record.saved["x_hat"]
    inv_std = record.saved["inv_std"]
    axes = tuple(range(grad.ndim - 1))
    d_gamma = (grad * x_hat).sum(axis=axes)
    d_beta = grad.sum(axis=axes)
    d_xhat = grad * record.saved["gamma"]
    if record.saved["training"]:
        n = record.saved["count"]
        d_input = (inv_std / n) * (
            n * d_xhat - d_xhat.sum(axis=axes) - x_hat * (d_xhat * x_hat).sum(axis=axes)
        )
    else:
        d_input = d_xhat * inv_std
    return d_input, d_gamma, d_beta


def bce_loss(probs: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    target = _as_tensor(target)
    if probs.shape != target.shape:
        raise DimensionError(f"bce_loss shape mismatch: probs {probs.shape} vs target {target.shape}")
    p_raw = _data(probs)
    t = _data(target)
    p = np.clip(p_raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = (p_raw >= BCE_CLAMP) & (p_raw <= 1.0 - BCE_CLAMP)
    return _emit("bce_loss", (probs, target), np.asarray(loss), p=p, t=t, inside=inside)


@backward_rule("bce_loss")
def _bce_backward(grad: np.ndarray, record: TapeRecord) -> tuple[np.ndarray, None]:
    p, t = record.saved["p"], record.saved["t"]
    d_probs = grad * (p - t) / (p * (1.0 - p)) / p.size
    return d_probs * record.saved["inside"], None


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Returns the populated gradients keyed by leaf tensor.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError(f"loss tensor {loss.id} was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for record in reversed(tape.records):
        upstream = grads.pop(record.output.id, None)
        if upstream is None:
            continue
        input_grads = BACKWARD_RULES[record.op](upstream, record)
        for tensor, grad in zip(record.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            grads[tensor.id] = grads[tensor.id] + grad if tensor.id in grads else grad
            if tensor not in tape:
                leaves[tensor.id] = tensor

    populated: dict[Tensor, np.ndarray] = {}
    for tensor_id, tensor in leaves.items():
        grad = grads[tensor_id].astype(tensor.dtype, copy=False)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        populated[tensor] = tensor.grad
    logger.debug("backward over %d records populated %d leaves", len(tape), len(populated))
    return populated


def finite_difference_grad(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences ``(f(x + h e) - f(x - h e)) / 2h``.

    With ``indices`` only those flat positions are perturbed and a 1-D array in
    the same order is returned; otherwise the result has ``x``'s shape.
    """

    def evaluate() -> float:
        value = f(x)
        return float(np.asarray(value.data if isinstance(value, Tensor) else value).reshape(-1)[0])

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    result = np.empty(len(positions), dtype=np.float64)
    for slot, index in enumerate(positions):
        original = flat[index]
        flat[index] = original + h
        upper = evaluate()
        flat[index] = original - h
        lower = evaluate()
        flat[index] = original
        result[slot] = (upper - lower) / (2.0 * h)
    return result.reshape(x.shape) if indices is None else result


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
