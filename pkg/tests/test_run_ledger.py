from pathlib import Path

from mixseg.config import load_run_config
from mixseg.database import ledger_session
from mixseg.services.run_ledger import fail_run, finish_run, format_runs, list_runs, run_stats, start_run


def test_start_records_run_settings(tmp_path: Path) -> None:
    config = load_run_config(overrides={"variant": "r2unet", "mix": "true", "seed": "5"})
    with ledger_session(tmp_path / "runs.db") as db:
        record = start_run(db, "train", config)
        assert record.id == 1
        assert record.status == "running"
        assert (record.variant, record.mix, record.seed, record.regime) == ("r2unet", True, 5, "skin")


def test_finish_and_fail_update_status(tmp_path: Path) -> None:
    path = tmp_path / "runs.db"
    with ledger_session(path) as db:
        ok = finish_run(db, start_run(db, "eval"), {"F1": 0.8774}, tmp_path / "metrics.csv")
        bad = fail_run(db, start_run(db, "train"), "DataError: no pairs")
        assert ok.status == "success" and ok.duration_seconds >= 0
        assert ok.metrics == {"F1": 0.8774}
        assert bad.status == "failed" and bad.error == "DataError: no pairs"

    with ledger_session(path) as db:
        records = list_runs(db)
        assert [r.command for r in records] == ["eval", "train"]
        assert records[0].output_path.endswith("metrics.csv")


def test_stats_over_runs(tmp_path: Path) -> None:
    with ledger_session(tmp_path / "runs.db") as db:
        empty = run_stats(db)
        assert (empty.total, empty.success_rate) == (0, "0.00%")
        finish_run(db, start_run(db, "prepare"))
        finish_run(db, start_run(db, "train"))
        fail_run(db, start_run(db, "eval"), "boom")
        stats = run_stats(db)
        assert stats.total == 3
        assert stats.failed == 1
        assert stats.success_rate == "66.67%"
        assert stats.average_duration_seconds >= 0


def test_format_runs_lists_every_record(tmp_path: Path) -> None:
    with ledger_session(tmp_path / "runs.db") as db:
        finish_run(db, start_run(db, "eval", load_run_config(overrides={"mix": "true"})), {"F1": 0.5})
        text = format_runs(list_runs(db), run_stats(db))
    lines = text.splitlines()
    assert lines[0].startswith("id")
    assert "unet+mix" in lines[1]
    assert lines[1].rstrip().endswith("0.5000")
    assert lines[-1].startswith("total=1 failed=0 success_rate=100.00%")
