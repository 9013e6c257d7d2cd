from .data_pipeline import ingest, split_dataset
from .metrics import compute_metrics, confusion_counts
from .training import adam_step, plateau_update, train

__all__ = ["adam_step", "compute_metrics", "confusion_counts", "ingest", "plateau_update", "split_dataset", "train"]
