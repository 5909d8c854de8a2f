"""Synthetic multi-query recall task: data, model, optimizer, training."""

from .data import MqarConfig, MqarSample, batch_arrays, curriculum_schedule, generate_mqar
from .kernel import KernelConfig, kernel_backward, kernel_forward
from .model import (
    Diagnostics,
    ModelConfig,
    ModelParams,
    Variant,
    accuracy_from_logits,
    evaluate,
    init_params,
    loss_and_grads,
    masked_cross_entropy,
    model_forward,
)
from .optim import AdamState, adam_step
from .train import LR_GRID, TrainConfig, TrainResult, config_fingerprint, train

__all__ = [
    "AdamState",
    "Diagnostics",
    "KernelConfig",
    "LR_GRID",
    "ModelConfig",
    "ModelParams",
    "MqarConfig",
    "MqarSample",
    "TrainConfig",
    "TrainResult",
    "Variant",
    "accuracy_from_logits",
    "adam_step",
    "batch_arrays",
    "config_fingerprint",
    "curriculum_schedule",
    "evaluate",
    "generate_mqar",
    "init_params",
    "kernel_backward",
    "kernel_forward",
    "loss_and_grads",
    "masked_cross_entropy",
    "model_forward",
    "train",
]
