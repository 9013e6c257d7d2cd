from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

from conftest import blob_pair, random_sample
from mixseg.errors import DataError, NumericError
from mixseg.nn import tensor_autograd as ag
from mixseg.nn.architectures import ArchitectureSpec, build_network
from mixseg.nn.tensor_autograd import Tape, Tensor, backward, finite_difference_grad, relative_error
from mixseg.schemas import METRIC_COLUMNS, MetricsReport
from mixseg.services.checkpoint import load_checkpoint
from mixseg.services.data_pipeline import Sample, compute_channel_stats
from mixseg.services.inference import evaluate
from mixseg.services.metrics import format_table
from mixseg.services.training import (
    HISTORY_COLUMNS,
    OptimizerState,
    ScheduleState,
    TrainSettings,
    adam_step,
    history_csv,
    plateau_update,
    read_history,
    train,
)


def tiny_dataset(count: int = 6, size: int = 8, seed: int = 0) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [random_sample(rng, size, size, source_id=f"s{i}") for i in range(count)]


def tiny_net(seed: int = 0):
    spec = ArchitectureSpec(variant="unet", mix=True, depth=2, base_width=4, kernel_sizes=(1, 3))
    return build_network(spec, seed=seed)


def test_zero_gradient_leaves_params_unchanged() -> None:
    param = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    param.grad = np.zeros(2)
    state = OptimizerState()
    adam_step([("p", param)], state)
    np.testing.assert_array_equal(param.data, [0.5, -1.0])
    assert state.step == 1
    assert param.grad is None


def test_first_step_moves_by_learning_rate() -> None:
    param = Tensor(np.array([0.0]), requires_grad=True)
    param.grad = np.array([1.0])
    adam_step([("p", param)], OptimizerState(lr=0.001))
    assert param.data[0] == pytest.approx(-0.001, rel=1e-6)


def test_non_finite_gradient_aborts_step() -> None:
    good = Tensor(np.array([1.0]), requires_grad=True)
    bad = Tensor(np.array([1.0]), requires_grad=True)
    good.grad = np.array([1.0])
    bad.grad = np.array([np.inf])
    state = OptimizerState()
    with pytest.raises(NumericError, match="decoder.weight"):
        adam_step([("encoder.weight", good), ("decoder.weight", bad)], state)
    assert good.data[0] == 1.0
    assert state.step == 0


def test_adam_trajectories_are_deterministic() -> None:
    def run() -> np.ndarray:
        rng = np.random.default_rng(5)
        param = Tensor(rng.normal(size=4), requires_grad=True)
        state = OptimizerState()
        for _ in range(5):
            param.grad = rng.normal(size=4)
            adam_step([("p", param)], state)
        return param.data

    np.testing.assert_array_equal(run(), run())


def test_adam_with_numeric_gradients_matches_analytic() -> None:
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=10), dtype=np.float64)
    target = Tensor(-rng.normal(size=10), dtype=np.float64)
    start = rng.normal(size=10)

    def loss_fn(w: Tensor) -> Tensor:
        residual = ag.add(ag.mul(w, x), target)
        return ag.sum_all(ag.mul(residual, residual))

    analytic = Tensor(start.copy(), requires_grad=True, dtype=np.float64)
    with Tape(np.float64) as tape:
        backward(loss_fn(analytic), tape)
    adam_step([("w", analytic)], OptimizerState())

    numeric = Tensor(start.copy(), requires_grad=True, dtype=np.float64)
    numeric.grad = finite_difference_grad(loss_fn, numeric)
    adam_step([("w", numeric)], OptimizerState())

    assert relative_error(analytic.data - start, numeric.data - start) < 1e-3


def test_plateau_keeps_lr_while_improving() -> None:
    state = ScheduleState()
    for loss in np.linspace(1.0, 0.5, 30):
        state = plateau_update(state, float(loss))
    assert state.lr == 0.001
    assert state.epochs_since_improvement == 0


def test_plateau_drops_once_after_ten_flat_epochs() -> None:
    state = ScheduleState()
    lrs = []
    for loss in [1.0] + [1.0] * 10 + [1.0] * 3:
        state = plateau_update(state, loss)
        lrs.append(state.lr)
    assert lrs[:10] == [0.001] * 10
    assert lrs[10] == pytest.approx(0.0001)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert sum(1 for a, b in zip(lrs, lrs[1:]) if b < a) == 1


def test_plateau_counter_resets_on_improvement() -> None:
    state = ScheduleState()
    state = plateau_update(state, 1.0)
    for _ in range(9):
        state = plateau_update(state, 1.0)
    assert state.epochs_since_improvement == 9
    state = plateau_update(state, 0.9)
    assert state.lr == 0.001
    assert state.epochs_since_improvement == 0
    assert plateau_update(state, 0.9 - 1e-7).epochs_since_improvement == 1


def test_history_csv_round_trip(tmp_path: Path) -> None:
    from mixseg.schemas import MetricsReport
    from mixseg.services.training import EpochRecord

    records = [
        EpochRecord(1, 0.693, 0.001, MetricsReport(AC=0.9, SE=0.8, SP=0.95, PC=0.7, F1=0.75, JS=0.6)),
        EpochRecord(2, 0.5, 0.0001, None),
    ]
    text = history_csv(records)
    assert text.splitlines()[0] == ",".join(HISTORY_COLUMNS)
    path = tmp_path / "history.csv"
    path.write_text(text, encoding="utf-8")
    assert read_history(path) == records


def test_one_epoch_smoke_run_writes_artifacts(tmp_path: Path) -> None:
    data = tiny_dataset(4)
    stats = compute_channel_stats(data)
    settings = TrainSettings(epochs=1, batch_size=4, seed=1)
    result = train(tiny_net(), data, data[:2], settings, stats, tmp_path)
    assert len(result.history) == 1
    assert result.history[0].val is not None
    assert result.best_path.is_file() and result.last_path.is_file()
    assert (tmp_path / "history.csv").read_text(encoding="utf-8").startswith("epoch,train_loss,lr,val_AC")
    checkpoint = load_checkpoint(result.last_path)
    assert checkpoint.header.epoch == 1
    assert checkpoint.header.optimizer.step == 1
    assert checkpoint.stats.mean.tolist() == stats.mean.tolist()


def test_training_is_deterministic(tmp_path: Path) -> None:
    data = tiny_dataset(5)
    stats = compute_channel_stats(data)
    settings = TrainSettings(epochs=2, batch_size=2, seed=3)
    from mixseg.services.data_pipeline import AugmentConfig

    settings_aug = TrainSettings(epochs=2, batch_size=2, seed=3, augment=AugmentConfig())
    for name, chosen in (("plain", settings), ("augmented", settings_aug)):
        first = train(tiny_net(2), data, data[:2], chosen, stats, tmp_path / name / "a")
        second = train(tiny_net(2), data, data[:2], chosen, stats, tmp_path / name / "b")
        assert (tmp_path / name / "a" / "history.csv").read_bytes() == (tmp_path / name / "b" / "history.csv").read_bytes()
        assert first.last_path.read_bytes() == second.last_path.read_bytes()


def test_resume_continues_exactly(tmp_path: Path) -> None:
    data = tiny_dataset(4)
    stats = compute_channel_stats(data)
    straight = train(tiny_net(), data, data[:2], TrainSettings(epochs=3, batch_size=2, seed=4), stats, tmp_path / "straight")

    partial_dir = tmp_path / "partial"
    train(tiny_net(), data, data[:2], TrainSettings(epochs=1, batch_size=2, seed=4), stats, partial_dir)
    resumed = train(
        tiny_net(), data, data[:2], TrainSettings(epochs=3, batch_size=2, seed=4), stats, partial_dir,
        resume=load_checkpoint(partial_dir / "last.ckpt"),
    )
    assert [r.epoch for r in resumed.history] == [1, 2, 3]
    assert resumed.last_path.read_bytes() == straight.last_path.read_bytes()
    assert (partial_dir / "history.csv").read_bytes() == (tmp_path / "straight" / "history.csv").read_bytes()


def test_training_without_validation_tracks_loss(tmp_path: Path) -> None:
    data = tiny_dataset(3)
    result = train(tiny_net(), data, [], TrainSettings(epochs=2, batch_size=3), compute_channel_stats(data), tmp_path)
    assert all(record.val is None for record in result.history)
    assert result.best_score is not None and result.best_score < 0


def test_training_rejects_empty_data(tmp_path: Path) -> None:
    with pytest.raises(DataError):
        train(tiny_net(), [], [], TrainSettings(), compute_channel_stats(tiny_dataset(1)), tmp_path)


@pytest.mark.slow
def test_tiny_overfit_reaches_high_f1(tmp_path: Path) -> None:
    samples = []
    for index in range(8):
        image, mask = blob_pair((48, 48), seed=100 + index)
        samples.append(
            Sample(
                (np.asarray(image, dtype=np.float32) / 255.0)[..., None],
                (np.asarray(mask) >= 128).astype(np.uint8)[..., None],
                f"blob{index}",
            )
        )
    stats = compute_channel_stats(samples)
    for mix in (True, False):
        spec = ArchitectureSpec(variant="unet", mix=mix, depth=4, base_width=16)
        settings = TrainSettings(epochs=200, batch_size=8, seed=0)
        result = train(build_network(spec, seed=0), samples, samples, settings, stats, tmp_path / spec.display_name)
        assert max(record.val.F1 for record in result.history) >= 0.95


def stripe_samples(count: int, width: int, seed: int) -> list[Sample]:
    """Straight bright strokes of ``width`` pixels on a noisy 48x48 background."""
    rng = np.random.default_rng(seed)
    samples = []
    for index in range(count):
        mask = Image.new("L", (48, 48), 0)
        draw = ImageDraw.Draw(mask)
        for _ in range(2):
            start, end = rng.integers(0, 48, size=2), rng.integers(0, 48, size=2)
            draw.line((*start.tolist(), *end.tolist()), fill=255, width=width)
        binary = (np.asarray(mask) >= 128).astype(np.uint8)[..., None]
        image = binary.astype(np.float32) * 0.6 + rng.uniform(0.0, 0.25, size=binary.shape).astype(np.float32)
        samples.append(Sample(image, binary, f"w{width}-{index}"))
    return samples


@pytest.mark.slow
def test_mix_and_plain_unet_compared_on_thin_and_thick_structures(tmp_path: Path) -> None:
    rows = []
    for dataset, width in (("Thin", 2), ("Thick", 12)):
        train_set = stripe_samples(8, width, seed=width)
        test_set = stripe_samples(4, width, seed=100 + width)
        stats = compute_channel_stats(train_set)
        for mix in (False, True):
            spec = ArchitectureSpec(variant="unet", mix=mix, depth=3, base_width=8)
            reports = []
            for seed in range(5):
                net = build_network(spec, seed=seed)
                settings = TrainSettings(epochs=40, batch_size=4, seed=seed)
                train(net, train_set, [], settings, stats, tmp_path / f"{dataset}-{spec.display_name}-{seed}")
                reports.append(evaluate(net, test_set, stats).report)
            median = MetricsReport(**{c: float(np.median([getattr(r, c) for r in reports])) for c in METRIC_COLUMNS})
            rows.append((dataset, spec.display_name, median))

    table = format_table(rows)
    print(table)
    assert [(dataset, method) for dataset, method, _ in rows] == [
        ("Thin", "U-Net"), ("Thin", "MixU-Net"), ("Thick", "U-Net"), ("Thick", "MixU-Net"),
    ]
    assert all(0.0 <= report.F1 <= 1.0 for _, _, report in rows)
