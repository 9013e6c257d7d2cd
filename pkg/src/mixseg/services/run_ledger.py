from __future__ import annotations

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from sqlalchemy import func, select
from sqlalchemy.orm import Session

from ..config import RunConfig
from ..models import RunRecord
from ..schemas import RunStats

logger = logging.getLogger("mixseg.ledger")


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def _aware(moment: datetime) -> datetime:
    # SQLite hands back naive datetimes
    return moment if moment.tzinfo is not None else moment.replace(tzinfo=timezone.utc)


def start_run(db: Session, command: str, config: RunConfig | None = None) -> RunRecord:
    record = RunRecord(command=command, status="running", created_at=utc_now())
    if config is not None:
        record.regime = config.run.regime.value
        record.variant = config.model.variant.value
        record.mix = config.model.mix
        record.seed = config.run.seed
    db.add(record)
    db.commit()
    return record


def _close(db: Session, record: RunRecord, status: str) -> None:
    finished = utc_now()
    record.status = status
    record.finished_at = finished
    record.duration_seconds = (finished - _aware(record.created_at)).total_seconds()
    db.commit()


def finish_run(
    db: Session, record: RunRecord, metrics: dict[str, Any] | None = None, output_path: Path | None = None
) -> RunRecord:
    record.metrics = metrics
    record.output_path = None if output_path is None else str(output_path)
    _close(db, record, "success")
    return record


def fail_run(db: Session, record: RunRecord, error: str) -> RunRecord:
    record.error = error
    _close(db, record, "failed")
    logger.info("Run %s (%s) recorded as failed", record.id, record.command)
    return record


def list_runs(db: Session) -> list[RunRecord]:
    return list(db.scalars(select(RunRecord).order_by(RunRecord.id)).all())


def run_stats(db: Session) -> RunStats:
    total = db.scalar(select(func.count(RunRecord.id))) or 0
    failed = db.scalar(select(func.count(RunRecord.id)).where(RunRecord.status == "failed")) or 0
    success = db.scalar(select(func.count(RunRecord.id)).where(RunRecord.status == "success")) or 0
    avg_duration = (
        db.scalar(
            select(func.avg(RunRecord.duration_seconds)).where(
                RunRecord.status == "success",
                RunRecord.duration_seconds.is_not(None),
            )
        )
        or 0.0
    )
    success_rate = f"{((success / total) * 100) if total else 0:.2f}%"
    return RunStats(
        total=total,
        failed=failed,
        success_rate=success_rate,
        average_duration_seconds=round(float(avg_duration), 2),
    )


def format_runs(records: list[RunRecord], stats: RunStats) -> str:
    lines = ["id  command    status   model            regime  seed  duration_s  F1"]
    for r in records:
        model = "-" if r.variant is None else f"{r.variant}{'+mix' if r.mix else ''}"
        duration = "-" if r.duration_seconds is None else f"{r.duration_seconds:.2f}"
        f1 = (r.metrics or {}).get("F1")
        seed = "-" if r.seed is None else str(r.seed)
        score = "-" if f1 is None else f"{f1:.4f}"
        lines.append(
            f"{r.id:<3} {r.command:<10} {r.status:<8} {model:<16} {r.regime or '-':<7} "
            f"{seed:<5} {duration:<11} {score}"
        )
    lines.append(
        f"total={stats.total} failed={stats.failed} success_rate={stats.success_rate} "
        f"average_duration_seconds={stats.average_duration_seconds}"
    )
    return "\n".join(lines)
