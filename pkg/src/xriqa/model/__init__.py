from .network import (COLUMN_HIGH, COLUMN_LOW, ModelConfig, ModelParams,
                      forward, forward_batch, init_params, mlsp_features, predict)
from .optim import NadamConfig, NadamState, clip_by_norm, nadam_step
from .training import TrainConfig, TrainSample, loss_and_gradients, train_two_stage
from .checkpoint import load_params, save_params

__all__ = [
    "COLUMN_HIGH", "COLUMN_LOW", "ModelConfig", "ModelParams", "forward",
    "forward_batch", "init_params", "mlsp_features", "predict",
    "NadamConfig", "NadamState", "clip_by_norm", "nadam_step",
    "TrainConfig", "TrainSample", "loss_and_gradients", "train_two_stage",
    "load_params", "save_params",
]
