from pathlib import Path

import pytest

from mixseg.config import REGIMES, Regime, env_threads, load_run_config
from mixseg.errors import ConfigurationError
from mixseg.nn.architectures import Variant


def write_config(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.ini"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_follow_skin_regime() -> None:
    config = load_run_config()
    assert config.run.regime is Regime.skin
    assert config.batch_size == 4
    assert config.split_ratios == (0.7, 0.1, 0.2)
    assert config.patch_count is None
    assert config.model.display_name == "U-Net"
    assert config.cache_dir == Path("runs") / "cache"


def test_patched_regimes() -> None:
    assert REGIMES[Regime.drive].patch_count == 531265
    assert REGIMES[Regime.chase].patch_count == 412400
    assert REGIMES[Regime.drive].square == 576
    assert REGIMES[Regime.chase].square == 960
    assert REGIMES[Regime.drive].patched and not REGIMES[Regime.skin].patched


def test_ini_sections_are_parsed(tmp_path: Path) -> None:
    path = write_config(
        tmp_path,
        "[run]\nseed = 7\nregime = drive\n\n"
        "[model]\nvariant = attunet\nmix = true\nkernel_sizes = 1,3,5\n\n"
        "[train]\nepochs = 3\n\n[paths]\noutput_dir = out\n",
    )
    config = load_run_config(path)
    assert config.run.seed == 7
    assert config.model.variant is Variant.attunet
    assert config.model.kernel_sizes == (1, 3, 5)
    assert config.model.display_name == "MixAttU-Net"
    assert config.batch_size == 32
    assert config.patch_count == 531265
    assert config.ledger_path.name == "runs.db"


def test_overrides_win_over_file(tmp_path: Path) -> None:
    path = write_config(tmp_path, "[train]\nepochs = 3\n")
    config = load_run_config(path, {"epochs": "9", "batch-size": "2", "patch_count": "100"})
    assert config.train.epochs == 9
    assert config.batch_size == 2
    assert config.patch_count == 100


def test_explicit_split_ratios() -> None:
    config = load_run_config(overrides={"train_ratio": "0.8", "val_ratio": "0", "test_ratio": "0.2"})
    assert config.split_ratios == (0.8, 0.0, 0.2)
    with pytest.raises(ConfigurationError, match="set together"):
        load_run_config(overrides={"train_ratio": "0.8"})


@pytest.mark.parametrize(
    ("text", "overrides", "message"),
    [
        ("[nope]\nx = 1\n", None, "unknown config section"),
        ("[train]\nepoch = 3\n", None, "epoch"),
        ("[train]\nepochs = 0\n", None, "epochs"),
        ("", {"learning_rat": "0.1"}, "unknown config key"),
        ("[run]\nregime = retina\n", None, "regime"),
        ("[model]\nkernel_sizes = 2,4\n", None, "kernel_sizes"),
    ],
)
def test_invalid_configs(tmp_path: Path, text: str, overrides: dict | None, message: str) -> None:
    with pytest.raises(ConfigurationError, match=message):
        load_run_config(write_config(tmp_path, text), overrides)


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="not found"):
        load_run_config(tmp_path / "absent.ini")


def test_ledger_and_threads_from_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.setenv("MIXSEG_LEDGER", str(tmp_path / "l.db"))
    monkeypatch.setenv("MIXSEG_THREADS", "3")
    config = load_run_config()
    assert config.ledger_path == tmp_path / "l.db"
    assert config.threads == 3
    assert load_run_config(overrides={"threads": "2"}).threads == 2

    monkeypatch.setenv("MIXSEG_THREADS", "zero")
    with pytest.raises(ConfigurationError, match="MIXSEG_THREADS"):
        env_threads()
