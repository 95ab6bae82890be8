"""Desk-scale dual-branch state-space image fusion on numpy."""
from .estimator import FusionMamba, check_image, check_pairs
from .io import read_image, write_image
from .losses import DEFAULT_WEIGHTS, GRID_BEST_WEIGHTS, LossWeights, total_loss
from .metrics import FusionReport, evaluate_all, fmi, fusion_ms_ssim, ms_ssim, qabf, scd, vif
from .network import ModelConfig, ModelState, forward_fuse, load_state, model_init, save_state
from .training import train_toy

__all__ = [
    "FusionMamba", "check_image", "check_pairs", "read_image", "write_image",
    "DEFAULT_WEIGHTS", "GRID_BEST_WEIGHTS", "LossWeights", "total_loss",
    "FusionReport", "evaluate_all", "fmi", "fusion_ms_ssim", "ms_ssim", "qabf", "scd", "vif",
    "ModelConfig", "ModelState", "forward_fuse", "load_state", "model_init", "save_state", "train_toy",
]
__version__ = "0.1.0"
