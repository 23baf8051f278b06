"""Two-stage pulmonary embolism detection on CT volumes."""

from ._embolite import (
    ConfigError,
    DataError,
    DimensionError,
    EmboliteError,
    auroc,
    bce_loss,
    dice_coefficient,
    focal_loss,
    generate_phantom,
    load_config,
    parameter_counts,
    plan_windows,
    run,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "EmboliteError",
    "auroc",
    "bce_loss",
    "dice_coefficient",
    "focal_loss",
    "generate_phantom",
    "load_config",
    "parameter_counts",
    "plan_windows",
    "run",
]
__version__ = "0.1.0"
