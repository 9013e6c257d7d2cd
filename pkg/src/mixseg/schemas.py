"""Pydantic models for validated specs and emitted reports."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigurationError

METRIC_COLUMNS = ("AC", "SE", "SP", "PC", "F1", "JS")


def describe_validation_error(exc: ValidationError, context: str) -> str:
    problems = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"]) or context
        problems.append(f"{location}: {error['msg']}")
    return f"invalid {context}: " + "; ".join(problems)


class StrictModel(BaseModel):
    """Frozen model that rejects unknown fields and raises ConfigurationError."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    @classmethod
    def create(cls, **values: Any):
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigurationError(describe_validation_error(exc, cls.__name__)) from exc


class MetricsReport(BaseModel):
    """The six segmentation metrics reported per dataset and method."""

    AC: float = Field(..., ge=0.0, le=1.0, description="Accuracy (TP+TN)/total", examples=[0.9479])
    SE: float = Field(..., ge=0.0, le=1.0, description="Sensitivity TP/(TP+FN)", examples=[0.8294])
    SP: float = Field(..., ge=0.0, le=1.0, description="Specificity TN/(TN+FP)", examples=[0.9843])
    PC: float = Field(..., ge=0.0, le=1.0, description="Precision TP/(TP+FP)", examples=[0.9312])
    F1: float = Field(..., ge=0.0, le=1.0, description="F1 score, equal to the Dice coefficient", examples=[0.8774])
    JS: float = Field(..., ge=0.0, le=1.0, description="Jaccard similarity |GT∩SR|/|GT∪SR|", examples=[0.7673])

    def values(self) -> list[float]:
        return [getattr(self, column) for column in METRIC_COLUMNS]

    def formatted(self) -> list[str]:
        return [f"{value:.4f}" for value in self.values()]


class RunStats(BaseModel):
    """Aggregate view over the run ledger."""

    total: int = Field(..., description="Total number of recorded runs", examples=[3])
    failed: int = Field(..., description="Number of failed runs", examples=[1])
    success_rate: str = Field(..., description="Percentage of successful runs", examples=["66.67%"])
    average_duration_seconds: float = Field(..., description="Mean duration of successful runs", examples=[12.5])
