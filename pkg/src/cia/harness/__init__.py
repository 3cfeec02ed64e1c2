"""Desk-scale experiment harness: dataset, campaigns, evaluation and CLI."""

from .dataset import Dataset, generate_dataset, load_dataset, save_dataset
from .experiment import (
    ConfigError,
    ExperimentConfig,
    Metrics,
    ModelFileMissing,
    QuantizationGuaranteeError,
    evaluate,
    load_config,
    majority_vote,
    quantize_roundtrip,
    run_experiment,
    select_target,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "ExperimentConfig",
    "Metrics",
    "ModelFileMissing",
    "QuantizationGuaranteeError",
    "evaluate",
    "generate_dataset",
    "load_config",
    "load_dataset",
    "majority_vote",
    "quantize_roundtrip",
    "run_experiment",
    "save_dataset",
    "select_target",
]
