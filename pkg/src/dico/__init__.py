"""Slot-concept attention for cross-modal retrieval, on a small numpy autodiff engine."""
from .config import Config, ablation_variant, parse_config
from .model import DiCoModel
from .retrieval import evaluate
from .synthdata import build_splits
from .trainer import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = ["Config", "DiCoModel", "ablation_variant", "build_splits", "evaluate",
           "load_checkpoint", "parse_config", "save_checkpoint", "train"]
