"""Datasets, training loops, shadow ensembles, experiments and the CLI."""

from .data import Dataset, DatasetSpec, generate_dataset
from .ensemble import Ensemble, train_shadow_ensemble
from .train import Defense, TrainConfig, TrainRecord, dp_sgd_step, replace_then_finetune, train, train_nsde_private

__all__ = [
    "Dataset",
    "DatasetSpec",
    "generate_dataset",
    "Defense",
    "TrainConfig",
    "TrainRecord",
    "train",
    "dp_sgd_step",
    "train_nsde_private",
    "replace_then_finetune",
    "Ensemble",
    "train_shadow_ensemble",
]
