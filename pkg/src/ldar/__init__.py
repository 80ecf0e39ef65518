"""Learned distraction-aware banded retrieval, with baselines and a harness."""

from .diffcore import Tape, Tensor, backward
from .environ import GeneratorConfig, Instance, RewardModel, generate, reward
from .harness import EvalReport, compare, evaluate, load_dataset, save_dataset
from .policy import (BandAction, BandParams, BandPolicy, PolicyConfig,
                     quantiles_to_indices, sample_band, select)
from .strategies import (BernoulliPolicy, StrategySpec, adaptive_k,
                         long_context, top_k)
from .trainer import (Checkpoint, TrainerConfig, TrainerState,
                      load_checkpoint, reinforce_step, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward",
    "GeneratorConfig", "Instance", "RewardModel", "generate", "reward",
    "EvalReport", "compare", "evaluate", "load_dataset", "save_dataset",
    "BandAction", "BandParams", "BandPolicy", "PolicyConfig",
    "quantiles_to_indices", "sample_band", "select",
    "BernoulliPolicy", "StrategySpec", "adaptive_k", "long_context", "top_k",
    "Checkpoint", "TrainerConfig", "TrainerState",
    "load_checkpoint", "reinforce_step", "save_checkpoint", "train",
    "__version__",
]
