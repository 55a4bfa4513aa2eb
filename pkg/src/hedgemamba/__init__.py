"""Distilling softmax attention into a Hedgehog linear attention and then into a Mamba-style SSM mixer."""

from .numerics import NonFiniteError, ShapeError, Tensor, backward, grad_check, no_grad
from .model import ModelConfig, init_model, lm_forward, load_checkpoint, save_checkpoint
from .distill import DistillPlan, run_distillation, run_stage1, run_stage2, train_teacher

__all__ = [
    "NonFiniteError", "ShapeError", "Tensor", "backward", "grad_check", "no_grad",
    "ModelConfig", "init_model", "lm_forward", "load_checkpoint", "save_checkpoint",
    "DistillPlan", "run_distillation", "run_stage1", "run_stage2", "train_teacher",
]
