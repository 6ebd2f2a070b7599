"""Sparse-to-dense point-cloud autoencoder with its own reverse-mode differentiation."""

from .model import (
    PRESETS,
    Architecture,
    ModelParams,
    chamfer_loss_and_grad,
    forward,
    init_params,
    load_params,
    reconstruct,
    save_params,
    self_attention,
)
from .train import DatasetConfig, TrainConfig, generate_dataset, train

__all__ = [
    "PRESETS", "Architecture", "ModelParams", "chamfer_loss_and_grad", "forward", "init_params",
    "load_params", "reconstruct", "save_params", "self_attention", "DatasetConfig", "TrainConfig",
    "generate_dataset", "train",
]
