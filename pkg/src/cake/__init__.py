"""Data-free distillation by synthesizing samples at a teacher's decision boundary."""

from .errors import CakeError, ConfigError, ContractError, DimensionError, DivergenceError, DomainError, FormatError
from .losses import LossWeights
from .synthesis import ExtractionConfig, SyntheticDataset, synthesize
from .training import TrainConfig, evaluate, train_classifier, train_student

__version__ = "0.1.0"

__all__ = [
    "CakeError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "DomainError",
    "ExtractionConfig",
    "FormatError",
    "LossWeights",
    "SyntheticDataset",
    "TrainConfig",
    "evaluate",
    "synthesize",
    "train_classifier",
    "train_student",
]
