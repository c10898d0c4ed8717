"""Attribute- and context-aware sequential recommendation with proxy-based item representations."""

from .config import ExperimentConfig, ModelConfig, TrainConfig
from .data import InteractionDataset, SynthConfig, generate_synthetic, load_interactions
from .evaluation import EvalReport, evaluate, rank_metrics
from .model import SequentialRecommender, build_for_dataset, build_model
from .tensor import Tensor, backward

__all__ = [
    "EvalReport",
    "ExperimentConfig",
    "InteractionDataset",
    "ModelConfig",
    "SequentialRecommender",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_for_dataset",
    "build_model",
    "evaluate",
    "generate_synthetic",
    "load_interactions",
    "rank_metrics",
]
