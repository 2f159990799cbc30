"""Desk-scale benchmark for compressed text classifiers.

Trains a small transformer, compresses it (quantization, pruning,
distillation, progressive module replacing), and scores the compressed
models on accuracy, label loyalty, probability loyalty, and robustness
under a black-box word-substitution attack.
"""

__version__ = "0.1.0"
