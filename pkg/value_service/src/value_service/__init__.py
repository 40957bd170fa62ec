"""Scalar value model: trains a regression head over conversations and
serves scores on the HTTP contract the search engine consumes."""

from .data import ValueTrainingSample, load_dataset
from .model import LoraSpec, ModelSpec, ValueModel, ValueScorer, tiny_spec
from .training import TrainingConfig, TrainingReport, train

__version__ = "0.1.0"

__all__ = [
    "LoraSpec",
    "ModelSpec",
    "TrainingConfig",
    "TrainingReport",
    "ValueModel",
    "ValueScorer",
    "ValueTrainingSample",
    "load_dataset",
    "tiny_spec",
    "train",
    "__version__",
]
