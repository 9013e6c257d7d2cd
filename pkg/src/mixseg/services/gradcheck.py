"""Finite-difference verification of every differentiable op, block and architecture.

Each item builds small random 64-bit inputs, reduces the op output to a
scalar through a fixed random projection, and compares tape gradients with
central differences on a seeded sample of coordinates. Block and network
items check the input and every parameter tensor.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from ..nn import tensor_autograd as ag
from ..nn.architectures import ArchitectureSpec, Variant, build_network, forward
from ..nn.blocks import BlockKind, BlockSpec, ParameterGroup, attention_gate, build_attention_gate, build_block
from ..nn.tensor_autograd import Tape, Tensor, backward, finite_difference_grad, relative_error

logger = logging.getLogger("mixseg.gradcheck")

TOLERANCE = 1e-4
STEP = 1e-6
SAMPLE_BUDGET = 16

# (inputs, scalar loss) built from a generator at float64
Case = tuple[list[Tensor], Callable[[], Tensor]]


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _tensor(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64)


def _projected(rng: np.random.Generator, op: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Scalar ``sum(op() * w)`` with ``w`` fixed on first use."""
    weights: list[Tensor] = []

    def loss() -> Tensor:
        out = op()
        if not weights:
            weights.append(Tensor(rng.normal(size=out.shape), dtype=np.float64))
        return ag.sum_all(ag.mul(out, weights[0]))

    return loss


def _case_add(rng: np.random.Generator) -> Case:
    a, b = _tensor(rng, 2, 3, 4), _tensor(rng, 4)
    return [a, b], _projected(rng, lambda: ag.add(a, b))


def _case_mul(rng: np.random.Generator) -> Case:
    a, b = _tensor(rng, 2, 3, 4), _tensor(rng, 3, 1)
    return [a, b], _projected(rng, lambda: ag.mul(a, b))


def _case_sum(rng: np.random.Generator) -> Case:
    a = _tensor(rng, 3, 4)
    return [a], lambda: ag.mul(ag.sum_all(a), ag.sum_all(a))


def _case_relu(rng: np.random.Generator) -> Case:
    values = rng.uniform(0.05, 1.0, size=(2, 4, 4, 3)) * rng.choice([-1.0, 1.0], size=(2, 4, 4, 3))
    a = Tensor(values, requires_grad=True, dtype=np.float64)
    return [a], _projected(rng, lambda: ag.relu(a))


def _case_sigmoid(rng: np.random.Generator) -> Case:
    a = _tensor(rng, 2, 4, 4, 3, low=-4.0, high=4.0)
    return [a], _projected(rng, lambda: ag.sigmoid(a))


def _conv_case(k: int) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        x, w, b = _tensor(rng, 2, 6, 5, 3), _tensor(rng, k, k, 3, 4), _tensor(rng, 4)
        return [x, w, b], _projected(rng, lambda: ag.conv2d_same(x, w, b))

    return build


def _case_concat(rng: np.random.Generator) -> Case:
    a, b, c = _tensor(rng, 2, 3, 3, 1), _tensor(rng, 2, 3, 3, 2), _tensor(rng, 2, 3, 3, 3)
    return [a, b, c], _projected(rng, lambda: ag.concat_channels([a, b, c]))


def _case_max_pool(rng: np.random.Generator) -> Case:
    a = Tensor(rng.permutation(2 * 4 * 6 * 2).reshape(2, 4, 6, 2) / 10.0, requires_grad=True, dtype=np.float64)
    return [a], _projected(rng, lambda: ag.max_pool2(a))


def _case_upsample(rng: np.random.Generator) -> Case:
    a = _tensor(rng, 2, 3, 2, 2)
    return [a], _projected(rng, lambda: ag.upsample2_nearest(a))


def _bn_case(training: bool) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        x = _tensor(rng, 3, 4, 4, 2, low=-2.0, high=2.0)
        gamma = _tensor(rng, 2, low=0.5, high=1.5)
        beta = _tensor(rng, 2)
        state = ag.RunningStats(rng.uniform(-0.5, 0.5, size=2), rng.uniform(0.5, 1.5, size=2))
        return [x, gamma, beta], _projected(rng, lambda: ag.batch_norm(x, gamma, beta, state, training=training))

    return build


def _case_bce(rng: np.random.Generator) -> Case:
    probs = _tensor(rng, 2, 4, 4, 1, low=0.05, high=0.95)
    target = (rng.random((2, 4, 4, 1)) < 0.5).astype(np.float64)
    return [probs], lambda: ag.bce_loss(probs, target)


def _parameters(group: ParameterGroup) -> list[Tensor]:
    return [tensor for _, tensor in group.named_parameters()]


def _block_case(kind: BlockKind) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        kernels = (1, 3) if kind.is_mix else (3,)
        spec = BlockSpec.create(kind=kind, in_channels=2, out_channels=4, kernel_sizes=kernels, recurrence_steps=2)
        params = build_block(spec, rng, np.float64)
        x = _tensor(rng, 2, 5, 5, 2)
        return [x, *_parameters(params)], _projected(rng, lambda: params(x, training=True))

    return build


def _case_attention(rng: np.random.Generator) -> Case:
    params = build_attention_gate(3, 4, rng, dtype=np.float64)
    g, x = _tensor(rng, 2, 4, 4, 3), _tensor(rng, 2, 4, 4, 4)
    return [g, x, *_parameters(params)], _projected(rng, lambda: attention_gate(g, x, params))


def _architecture_case(variant: Variant, mix: bool) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        spec = ArchitectureSpec.create(
            variant=variant, mix=mix, depth=2, base_width=4, in_channels=1, kernel_sizes=(1, 3)
        )
        net = build_network(spec, seed=int(rng.integers(2**31)), dtype=np.float64)
        x = _tensor(rng, 2, 4, 4, 1)
        target = (rng.random((2, 4, 4, 1)) < 0.5).astype(np.float64)
        return [x, *_parameters(net)], lambda: ag.bce_loss(forward(net, x, training=True), target)

    return build


def suite() -> list[tuple[str, Callable[[np.random.Generator], Case]]]:
    items: list[tuple[str, Callable[[np.random.Generator], Case]]] = [
        ("add", _case_add),
        ("mul", _case_mul),
        ("sum", _case_sum),
        ("relu", _case_relu),
        ("sigmoid", _case_sigmoid),
        ("conv2d_same k=1", _conv_case(1)),
        ("conv2d_same k=3", _conv_case(3)),
        ("conv2d_same k=5", _conv_case(5)),
        ("concat_channels", _case_concat),
        ("max_pool2", _case_max_pool),
        ("upsample2_nearest", _case_upsample),
        ("batch_norm train", _bn_case(True)),
        ("batch_norm eval", _bn_case(False)),
        ("bce_loss", _case_bce),
        ("conv_block", _block_case(BlockKind.conv)),
        ("recurrent_conv_block", _block_case(BlockKind.recurrent)),
        ("mix_conv_block", _block_case(BlockKind.mix_conv)),
        ("mix_recurrent_block", _block_case(BlockKind.mix_recurrent)),
        ("attention_gate", _case_attention),
    ]
    for variant in Variant:
        for mix in (False, True):
            spec = ArchitectureSpec(variant=variant, mix=mix, base_width=4, kernel_sizes=(1, 3))
            items.append((spec.display_name, _architecture_case(variant, mix)))
    return items


def check_case(case: Case, rng: np.random.Generator, budget: int = SAMPLE_BUDGET) -> tuple[float, int]:
    inputs, loss_fn = case
    with Tape(np.float64) as tape:
        loss = loss_fn()
        backward(loss, tape)
    analytic_parts, numeric_parts = [], []
    for tensor in inputs:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        indices = np.arange(tensor.size)
        if tensor.size > budget:
            indices = np.sort(rng.choice(tensor.size, size=budget, replace=False))
        analytic_parts.append(grad.reshape(-1)[indices])
        numeric_parts.append(finite_difference_grad(lambda _: loss_fn(), tensor, h=STEP, indices=indices))
        tensor.grad = None
    analytic = np.concatenate(analytic_parts)
    numeric = np.concatenate(numeric_parts)
    return relative_error(analytic, numeric), analytic.size


def run_gradcheck(seeds: Iterable[int] = (0,), names: Sequence[str] | None = None) -> list[GradcheckResult]:
    """Max relative error per suite item over ``seeds``."""
    results = []
    seeds = list(seeds)
    for name, build in suite():
        if names is not None and name not in names:
            continue
        worst, checked = 0.0, 0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            error, count = check_case(build(rng), rng)
            worst = max(worst, error)
            checked += count
        result = GradcheckResult(name, worst, checked)
        logger.debug("gradcheck %s max_rel_err=%.3e", name, worst)
        results.append(result)
    return results


def format_report(results: Sequence[GradcheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [
        f"{r.name.ljust(width)}  {r.max_error:.3e}  {'PASS' if r.passed else 'FAIL'}" for r in results
    ]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results)} items, {failed} failed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
