"""Python interface to the densegrad engine."""

from ._densegrad import (
    DensegradError,
    Model,
    augment,
    binary_auc,
    confusion,
    evaluate,
    explain_files,
    generate_synthetic,
    param_count,
    per_class_prf,
    scan_dataset,
    stratified_split,
    train_run,
)

__all__ = [
    "DensegradError",
    "Model",
    "augment",
    "binary_auc",
    "confusion",
    "evaluate",
    "explain_files",
    "generate_synthetic",
    "param_count",
    "per_class_prf",
    "scan_dataset",
    "stratified_split",
    "train_run",
]
