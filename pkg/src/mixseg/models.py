import json
from datetime import datetime
from typing import Any

from sqlalchemy import Boolean, DateTime, Float, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column

from .database import Base


class RunRecord(Base):
    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    command: Mapped[str] = mapped_column(String(32), nullable=False)
    status: Mapped[str] = mapped_column(String(32), nullable=False, default="running")

    regime: Mapped[str | None] = mapped_column(String(16), nullable=True)
    variant: Mapped[str | None] = mapped_column(String(16), nullable=True)
    mix: Mapped[bool | None] = mapped_column(Boolean, nullable=True)
    seed: Mapped[int | None] = mapped_column(Integer, nullable=True)
    _metrics_json: Mapped[str | None] = mapped_column("metrics", Text, nullable=True)

    @property
    def metrics(self) -> dict[str, Any] | None:
        if self._metrics_json is None:
            return None
        try:
            return json.loads(self._metrics_json)
        except (json.JSONDecodeError, TypeError):
            return None

    @metrics.setter
    def metrics(self, value: dict[str, Any] | None) -> None:
        if value is None:
            self._metrics_json = None
        else:
            self._metrics_json = json.dumps(value, sort_keys=True)

    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), nullable=False)
    finished_at: Mapped[datetime | None] = mapped_column(DateTime(timezone=True), nullable=True)
    duration_seconds: Mapped[float | None] = mapped_column(Float, nullable=True)

    output_path: Mapped[str | None] = mapped_column(Text, nullable=True)
    error: Mapped[str | None] = mapped_column(Text, nullable=True)
