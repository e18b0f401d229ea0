"""Point-cloud and IMU fusion network trained from scratch with numpy."""

from .arch import FEATURE_SETS, IMU_DIM, ABLATION_ARCHS, ArchConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Prepared, point_block, prepare
from .model import (
    NetworkParams, StaleCacheError, backward, forward, forward_batch, init_network, l1_loss, mae, predict,
)
from .optim import OptimState, adam_step
from .train import (
    AblationResult, evaluate, mean_baseline_mae, overfit, read_history, run_ablation, train, write_history,
)

__all__ = [
    "FEATURE_SETS", "IMU_DIM", "ABLATION_ARCHS", "ArchConfig", "CheckpointError", "load_checkpoint",
    "save_checkpoint", "Prepared", "point_block", "prepare", "NetworkParams", "StaleCacheError", "backward",
    "forward", "forward_batch", "init_network", "l1_loss", "mae", "predict", "OptimState", "adam_step",
    "AblationResult", "evaluate", "mean_baseline_mae", "overfit", "read_history", "run_ablation", "train",
    "write_history",
]
