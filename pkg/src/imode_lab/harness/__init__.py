"""Experiment orchestration: training protocol, evaluation, CLI, CSV ingestion."""

from .training import (
    Metrics,
    RunConfig,
    TrainingError,
    build_model,
    evaluate,
    evaluate_counterfactual,
    export_trace,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train,
    train_fold,
)

__all__ = [
    "Metrics",
    "RunConfig",
    "TrainingError",
    "build_model",
    "evaluate",
    "evaluate_counterfactual",
    "export_trace",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    "train",
    "train_fold",
]
