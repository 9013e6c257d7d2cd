import numpy as np
import pytest

from mixseg.errors import ConfigurationError, DimensionError
from mixseg.nn.architectures import ArchitectureSpec, Variant, build_network, forward, parameter_count
from mixseg.nn.tensor_autograd import Tape, Tensor, backward, bce_loss

ALL_SPECS = [(variant, mix) for variant in Variant for mix in (False, True)]


def small(variant: Variant | str = "unet", mix: bool = False, **extra) -> ArchitectureSpec:
    values = {"variant": variant, "mix": mix, "depth": 3, "base_width": 4, "kernel_sizes": (1, 3)}
    values.update(extra)
    return ArchitectureSpec.create(**values)


def test_default_widths_double_per_level() -> None:
    spec = ArchitectureSpec()
    assert spec.widths == [64, 128, 256, 512, 1024]
    assert spec.kernel_sizes == (1, 3, 5, 7)


def test_display_names() -> None:
    names = {ArchitectureSpec(variant=v, mix=m).display_name for v, m in ALL_SPECS}
    assert names == {"U-Net", "MixU-Net", "R2U-Net", "MixR2U-Net", "AttU-Net", "MixAttU-Net"}


def test_invalid_spec_names_the_field() -> None:
    with pytest.raises(ConfigurationError, match="depth"):
        ArchitectureSpec.create(depth=1)
    with pytest.raises(ConfigurationError, match="kernel_sizes"):
        ArchitectureSpec.create(kernel_sizes="1,2")
    assert ArchitectureSpec.create(kernel_sizes="1, 3,5").kernel_sizes == (1, 3, 5)


@pytest.mark.parametrize(("variant", "mix"), ALL_SPECS)
def test_random_shapes_map_to_probabilities(variant: Variant, mix: bool) -> None:
    spec = small(variant, mix)
    net = build_network(spec, seed=3)
    rng = np.random.default_rng(7)
    for _ in range(10):
        b = int(rng.integers(1, 3))
        h, w = (int(v) * spec.spatial_multiple for v in rng.integers(1, 4, size=2))
        out = forward(net, Tensor(rng.normal(size=(b, h, w, 1)).astype(np.float32)))
        assert out.shape == (b, h, w, 1)
        assert (out.data > 0).all() and (out.data < 1).all()


def test_skin_sized_batch() -> None:
    spec = small("unet", True, depth=5, in_channels=3)
    out = forward(build_network(spec), Tensor(np.zeros((4, 192, 256, 3), dtype=np.float32)))
    assert out.shape == (4, 192, 256, 1)


def test_patch_sized_batch_depth_four() -> None:
    spec = small("r2unet", False, depth=4)
    out = build_network(spec)(Tensor(np.zeros((32, 48, 48, 1), dtype=np.float32)))
    assert out.shape == (32, 48, 48, 1)


def test_single_kernel_mix_network_degenerates_to_plain(rng: np.random.Generator) -> None:
    for variant in Variant:
        plain = build_network(small(variant, False), seed=11)
        mixed = build_network(small(variant, True, kernel_sizes=(3,)), seed=11)
        assert parameter_count(plain) == parameter_count(mixed)
        batch = Tensor(rng.normal(size=(2, 8, 8, 1)).astype(np.float32))
        np.testing.assert_array_equal(forward(plain, batch, training=True).data, forward(mixed, batch, training=True).data)


def test_attention_gate_per_skip() -> None:
    net = build_network(small("attunet", True))
    assert net.gate_count == net.spec.depth - 1 == len(net.skip_wiring)
    assert build_network(small("unet", True)).gate_count == 0


def test_zero_head_outputs_half() -> None:
    net = build_network(small("attunet", False))
    net.head.kernel.data[...] = 0.0
    net.head.bias.data[...] = 0.0
    out = net(Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 1)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, np.full((1, 8, 8, 1), 0.5, dtype=np.float32))


def test_saturated_head_stays_inside_unit_interval() -> None:
    net = build_network(small("r2unet", True))
    net.head.bias.data[...] = 40.0
    high = net(Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 1)).astype(np.float32)))
    assert high.dtype == np.float32
    assert high.data.max() < 1.0
    net.head.bias.data[...] = -120.0
    low = net(Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 1)).astype(np.float32)))
    assert low.data.min() > 0.0


@pytest.mark.parametrize(("variant", "mix"), ALL_SPECS)
def test_every_parameter_receives_a_gradient(variant: Variant, mix: bool) -> None:
    net = build_network(small(variant, mix), seed=2)
    rng = np.random.default_rng(5)
    batch = Tensor(rng.normal(size=(2, 8, 8, 1)).astype(np.float32))
    target = (rng.random((2, 8, 8, 1)) < 0.4).astype(np.float32)
    with Tape() as tape:
        backward(bce_loss(forward(net, batch, training=True), target), tape)
    for name, tensor in net.named_parameters():
        assert tensor.grad is not None, name
        assert tensor.grad.shape == tensor.shape, name
        assert np.isfinite(tensor.grad).all(), name


def test_indivisible_input_suggests_padding() -> None:
    net = build_network(small())
    with pytest.raises(DimensionError, match=r"pad by \(2, 0\) to \(12, 8\)"):
        forward(net, Tensor(np.zeros((1, 10, 8, 1), dtype=np.float32)))
    with pytest.raises(DimensionError, match="channels"):
        forward(net, Tensor(np.zeros((1, 8, 8, 3), dtype=np.float32)))


def test_doubling_width_roughly_quadruples_parameters() -> None:
    narrow = parameter_count(build_network(small(base_width=8)))
    wide = parameter_count(build_network(small(base_width=16)))
    assert 3.5 <= wide / narrow <= 4.5


def test_build_is_deterministic_under_seed() -> None:
    first = dict(build_network(small("r2unet", True), seed=4).named_parameters())
    second = dict(build_network(small("r2unet", True), seed=4).named_parameters())
    assert first.keys() == second.keys()
    for name in first:
        np.testing.assert_array_equal(first[name].data, second[name].data)
