"""Int8 post-training quantization and quantization-aware training.

The scheme is symmetric per-tensor: scale = max|w| / 127, integers in
[-127, 127], rounding half away from zero. Activations are quantized
dynamically on entry to and exit from every quantized matmul, with one
scale per forward batch the way dynamic int8 inference engines compute
it. Embeddings and layer-norm parameters stay float.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..errors import InvalidConfig, InvalidInput
from ..model import ClassifierModel, QuantizedLinear, weight_scale
from ..tensor import Tensor, ensure_finite, round_half_away
from .trainer import encode_split, run_training


def quantize_weight(w: np.ndarray) -> QuantizedLinear:
    """Quantize one weight matrix; all-zero tensors get scale 1 and a warning."""
    if not np.all(np.isfinite(w)):
        raise InvalidInput("weight tensor contains non-finite values")
    if np.all(w == 0.0):
        warnings.warn("all-zero weight tensor quantized with scale 1")
    scale = weight_scale(w)
    q = np.clip(round_half_away(w / scale), -127, 127).astype(np.int8)
    return QuantizedLinear(q, scale, w.shape, quantize_activations=True)


def quantize_ptq(model: ClassifierModel, calibration) -> ClassifierModel:
    """Convert every linear weight to int8 without retraining.

    ``calibration`` is a (ids, mask) batch or a list of texts; it is run
    through the quantized model once as a smoke check (dynamic activation
    scales need no stored calibration statistics).
    Quantizing an already-quantized model is a no-op copy.
    """
    out = model.clone(provenance=f"ptq({model.provenance})")
    for owner, slot in out.linear_slots():
        w = getattr(owner, slot)
        if isinstance(w, QuantizedLinear):
            continue
        setattr(owner, slot, quantize_weight(w.data))

    ids, mask = _calibration_batch(out, calibration)
    logits, _ = out.forward_batch(ids, mask)
    ensure_finite("calibration logits", logits.data)
    return out


def _calibration_batch(model: ClassifierModel, calibration):
    if calibration is None:
        raise InvalidInput("calibration batch must be non-empty")
    if isinstance(calibration, tuple):
        ids, mask = calibration
        ids = np.asarray(ids)
        if ids.size == 0:
            raise InvalidInput("calibration batch must be non-empty")
        return ids, np.asarray(mask)
    texts = list(calibration)
    if not texts:
        raise InvalidInput("calibration batch must be non-empty")
    if model.tokenizer is None:
        raise InvalidInput("text calibration needs a model tokenizer")
    return model.tokenizer.encode_batch(texts)


def dequantize_model(model: ClassifierModel) -> ClassifierModel:
    """Expand int8 slots back to float tensors (scale times integers)."""
    out = model.clone(provenance=f"dequant({model.provenance})")
    for owner, slot in out.linear_slots():
        w = getattr(owner, slot)
        if isinstance(w, QuantizedLinear):
            setattr(owner, slot, Tensor(w.as_float(), requires_grad=True))
    return out


def train_qat(
    init: ClassifierModel,
    dataset,
    loss_choice: str = "cross-entropy",
    epochs: int = 3,
    teacher: ClassifierModel | None = None,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
    temperature: float = 10.0,
    alpha: float = 1.0,
    beta: float = 0.0,
) -> tuple[ClassifierModel, list[float]]:
    """Quantization-aware training: fake-quant forward, real int8 export.

    Starts from ``init`` (float or already-quantized; int8 weights are
    expanded first), trains with the quantize-dequantize simulation and
    straight-through gradients, and exports through the same path as
    :func:`quantize_ptq`. Zero epochs therefore reduce exactly to PTQ.
    Returns the quantized model and the per-epoch loss history.
    """
    if loss_choice not in ("cross-entropy", "kd", "kd+ce"):
        raise InvalidConfig(f"unknown loss choice {loss_choice!r}")
    if loss_choice in ("kd", "kd+ce") and teacher is None:
        raise InvalidConfig(f"loss {loss_choice!r} requires a teacher model")
    work = dequantize_model(init) if init.is_quantized() else init.clone()
    if work.tokenizer is None:
        raise InvalidInput("model needs a tokenizer to train on raw text")

    history: list[float] = []
    if epochs > 0:
        ids, mask = encode_split(work.tokenizer, dataset.texts("train"))
        history = run_training(
            work, ids, mask, dataset.labels("train"),
            epochs=epochs, seed=seed, lr=lr, batch_size=batch_size,
            loss_choice=loss_choice, teacher=teacher,
            temperature=temperature, alpha=alpha, beta=beta, fake_quant=True,
        )
    quantized = quantize_ptq(work, dataset.texts("dev")[:8] or dataset.texts("train")[:8])
    quantized.provenance = f"qat({init.provenance}, epochs={epochs}, loss={loss_choice})"
    return quantized, history
