"""The segmentation network, its configuration, training and inference."""

from .config import STRATEGIES, PipelineConfig, load_config, micro_config, save_config
from .model import PNSPlus
from .train import ClipTooShortError, infer_clip, load_checkpoint, save_checkpoint, train

__all__ = [
    "STRATEGIES",
    "ClipTooShortError",
    "PNSPlus",
    "PipelineConfig",
    "infer_clip",
    "load_checkpoint",
    "load_config",
    "micro_config",
    "save_checkpoint",
    "save_config",
    "train",
]
