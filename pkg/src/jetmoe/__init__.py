"""Sparse mixture-of-experts language model with MoE attention and feed-forward layers."""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import JetMoeModel, ModelConfig, build_model, count_params, forward
from .ndauto import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = ["JetMoeModel", "ModelConfig", "build_model", "count_params", "forward",
           "load_checkpoint", "save_checkpoint", "Tape", "Tensor", "grad_check"]
