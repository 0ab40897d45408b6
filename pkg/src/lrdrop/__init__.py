"""Dropout consistency regularization at every encoder layer, on a small transformer."""

from .config import ExperimentConfig, load_config
from .losses import Ablation, LossBreakdown, LossWeights, total_objective
from .tensor import GradientTape, RngStream, Tensor, backward
from .trainer import RunResult, compare_runs, evaluate, run_seeds, run_training, train_step
from .transformer import ForwardTrace, ModelConfig, forward_pass, init_params

__version__ = "0.1.0"
