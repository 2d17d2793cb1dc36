"""Targeted negative training for autoregressive sequence models."""
from .distributions import Vocab, project_out_negatives, smooth_distribution
from .errors import TNTError
from .model import TabularModel, TinyNeuralModel, load_model
from .objective import METHODS, AnnotatedSequence, ObjectiveConfig, TokenAnnotation, sequence_loss
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatedSequence",
    "METHODS",
    "ObjectiveConfig",
    "TNTError",
    "TabularModel",
    "TinyNeuralModel",
    "TokenAnnotation",
    "TrainConfig",
    "Vocab",
    "load_model",
    "project_out_negatives",
    "sequence_loss",
    "smooth_distribution",
    "train",
]
