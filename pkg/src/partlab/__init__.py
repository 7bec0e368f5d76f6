"""Partial-label learning over assembled datasets with a learnable task-encoding adapter."""
from .autodiff import ContractError, Tape, Tensor, backward, grad_check, no_grad
from .losses import LossBreakdown, LossMask, SharpenConfig, total_loss
from .model import ModelConfig, ModelState, init_model, load_checkpoint, save_checkpoint
from .training import NumericalError, RunMetrics, TrainConfig, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "ContractError", "LossBreakdown", "LossMask", "ModelConfig", "ModelState", "NumericalError",
    "RunMetrics", "SharpenConfig", "Tape", "Tensor", "TrainConfig", "backward", "fit",
    "grad_check", "init_model", "load_checkpoint", "no_grad", "save_checkpoint", "total_loss",
    "train_step",
]
