"""Masked capsule autoencoders built on a small numpy autodiff core."""
from .pipeline import MCAEModel, ModelConfig, finetune_forward, pretrain_forward
from .training import TrainConfig, run_finetune, run_pretrain

__version__ = "0.1.0"
__all__ = ["MCAEModel", "ModelConfig", "TrainConfig", "finetune_forward", "pretrain_forward",
           "run_finetune", "run_pretrain"]
