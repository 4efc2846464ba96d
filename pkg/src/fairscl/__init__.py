"""Group-aware supervised contrastive learning for subgroup fairness, with its evaluation toolkit."""

__version__ = "0.1.0"

from .dataset import Dataset, Record, SyntheticConfig, TableSchema, balanced_resample, generate_synthetic, ingest_table, split
from .metrics import ScoredSet, auc, fairness_report, marginal_auc, relative_change
from .nnet import TrainConfig, predict, train_adv, train_balanced, train_erm, train_proposed, train_scl

__all__ = [
    "Dataset",
    "Record",
    "ScoredSet",
    "SyntheticConfig",
    "TableSchema",
    "TrainConfig",
    "auc",
    "balanced_resample",
    "fairness_report",
    "generate_synthetic",
    "ingest_table",
    "marginal_auc",
    "predict",
    "relative_change",
    "split",
    "train_adv",
    "train_balanced",
    "train_erm",
    "train_proposed",
    "train_scl",
]
