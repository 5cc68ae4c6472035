from . import checkpoint
from .layers import (LAYER_KINDS, Conv1d, Conv2d, Dropout, Embedding, Flatten, Layer,
                     LayerNorm, Linear, ReLU, Sequential, TokenMeanPool, build_layer)
from .losses import LOSSES, mae_loss, mse_loss
from .optim import TrainConfig, adam_step, init_adam_state, lr_at

__all__ = [
    "LAYER_KINDS", "Conv1d", "Conv2d", "Dropout", "Embedding", "Flatten", "Layer",
    "LayerNorm", "Linear", "ReLU", "Sequential", "TokenMeanPool", "build_layer",
    "LOSSES", "mae_loss", "mse_loss",
    "TrainConfig", "adam_step", "init_adam_state", "lr_at", "checkpoint",
]
