"""Compression operators: quantization, pruning, distillation, module
replacing, and declarative recipes combining them."""

from .distill import distill
from .prune import head_importance, head_prune
from .quantize import dequantize_model, quantize_ptq, train_qat
from .recipe import CompressionRecipe, Stage, run_recipe
from .theseus import ReplacementSchedule, theseus_train
from .trainer import Adam, finetune, run_training, skip_layer_mapping

__all__ = [
    "Adam",
    "CompressionRecipe",
    "ReplacementSchedule",
    "Stage",
    "dequantize_model",
    "distill",
    "finetune",
    "head_importance",
    "head_prune",
    "quantize_ptq",
    "run_recipe",
    "run_training",
    "skip_layer_mapping",
    "theseus_train",
    "train_qat",
]
