"""Multi-channel self-distillation on a small numpy autodiff core."""

from .config import ExperimentConfig, parse_config
from .data import Dataset, EpochSampler, NoiseSpec, augment, inject_label_noise, load_cifar10, load_idx
from .losses import LossBreakdown, SoftLabelSet, kl_loss, lambda_schedule, soften, total_loss
from .models import Model, ModelSpec, build
from .tensor import GradientTape, ParameterSet, Tensor, backward, finite_difference_check, sgd_step
from .trainer import TrainConfig, run_experiment, run_step

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EpochSampler", "ExperimentConfig", "GradientTape", "LossBreakdown", "Model", "ModelSpec",
    "NoiseSpec", "ParameterSet", "SoftLabelSet", "Tensor", "TrainConfig", "augment", "backward", "build",
    "finite_difference_check", "inject_label_noise", "kl_loss", "lambda_schedule", "load_cifar10", "load_idx",
    "parse_config", "run_experiment", "run_step", "sgd_step", "soften", "total_loss",
]
