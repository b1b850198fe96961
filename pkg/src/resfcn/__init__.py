"""Res-FCN: residual fully convolutional lesion segmentation on multi-modal MR volumes, in numpy."""
from .data import (MODALITIES, PatchSample, PatchSpec, SyntheticConfig, VolumeCase, augment, extract_patches,
                   generate_synthetic, load_mask, load_volume, normalize_slices, save_mask, save_volume,
                   split_cases, split_train_val)
from .evaluation import (SWEEP_GRID, EvalReport, SweepRow, binarize, connected_components, count_fn_fp,
                         dice_coefficient, evaluate_dataset, predict_volume, threshold_sweep)
from .network import ResFCN, build_resfcn, load_checkpoint, save_checkpoint
from .training import LossConfig, OptimizerConfig, TrainConfig, dice_loss, dice_loss_backward, train

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "PatchSample",
    "PatchSpec",
    "SyntheticConfig",
    "VolumeCase",
    "augment",
    "extract_patches",
    "generate_synthetic",
    "load_mask",
    "load_volume",
    "normalize_slices",
    "save_mask",
    "save_volume",
    "split_cases",
    "split_train_val",
    "SWEEP_GRID",
    "EvalReport",
    "SweepRow",
    "binarize",
    "connected_components",
    "count_fn_fp",
    "dice_coefficient",
    "evaluate_dataset",
    "predict_volume",
    "threshold_sweep",
    "ResFCN",
    "build_resfcn",
    "load_checkpoint",
    "save_checkpoint",
    "LossConfig",
    "OptimizerConfig",
    "TrainConfig",
    "dice_loss",
    "dice_loss_backward",
    "train",
]
