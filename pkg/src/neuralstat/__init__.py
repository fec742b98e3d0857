"""Hierarchical VAE over datasets with an exchangeable statistic network."""
from ._binio import FormatError
from .algorithms import (conditional_sample, context_posterior, context_posteriors, few_shot_classify,
                         fewshot_episode_eval, representative_subsample, sample_dataset)
from .data import DatasetBatch, Family, gen_spatial_mnist, gen_synthetic_1d, load_idx, load_sets, save_sets
from .model import PRESETS, SPATIAL_PRESET, SYNTHETIC_PRESET, ElboTerms, ModelConfig, NeuralStatistician
from .tensor import DomainError, ShapeError, Tensor
from .training import TrainConfig, TrainLog, evaluate, fit

__all__ = [
    "FormatError", "DomainError", "ShapeError", "Tensor",
    "DatasetBatch", "Family", "gen_spatial_mnist", "gen_synthetic_1d", "load_idx", "load_sets", "save_sets",
    "PRESETS", "SPATIAL_PRESET", "SYNTHETIC_PRESET", "ElboTerms", "ModelConfig", "NeuralStatistician",
    "TrainConfig", "TrainLog", "evaluate", "fit",
    "conditional_sample", "context_posterior", "context_posteriors", "few_shot_classify",
    "fewshot_episode_eval", "representative_subsample", "sample_dataset",
]
