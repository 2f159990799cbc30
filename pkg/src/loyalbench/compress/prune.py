"""Attention-head pruning driven by gate-gradient importance scores.

Importance of a head is the accumulated absolute gradient of the
cross-entropy loss with respect to that head's gate, probed at gate
override 1 over the scoring batches. Heads already pruned keep gate 0
through the override (the probe multiplies stored gates), so their
importance comes out exactly zero and they are never counted as
prunable again.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidConfig, InvalidInput
from ..losses import cross_entropy_op
from ..model import ClassifierModel
from ..tensor import GradTape, Tensor
from .trainer import encode_split


def head_importance(
    model: ClassifierModel,
    dataset,
    split: str = "dev",
    batch_size: int = 64,
) -> np.ndarray:
    """(layers, heads) array of summed |d loss / d gate| over batches."""
    if model.tokenizer is None:
        raise InvalidInput("model needs a tokenizer to score heads on raw text")
    texts = dataset.texts(split)
    labels = dataset.labels(split)
    if not texts:
        raise InvalidInput(f"split {split!r} is empty")
    ids, mask = encode_split(model.tokenizer, texts)

    importance = np.zeros((model.num_layers, model.num_heads))
    for start in range(0, ids.shape[0], batch_size):
        bids, bmask = ids[start : start + batch_size], mask[start : start + batch_size]
        overrides = [
            Tensor(np.ones(model.num_heads), requires_grad=True)
            for _ in range(model.num_layers)
        ]
        with GradTape() as tape:
            tape.watch(overrides)
            logits, _ = model.forward_batch(bids, bmask, gate_overrides=overrides)
            loss = cross_entropy_op(logits, labels[start : start + batch_size])
        for li, g in enumerate(tape.gradients(loss)):
            importance[li] += np.abs(g)
    return importance


def head_prune(
    model: ClassifierModel,
    dataset,
    fraction: float,
    split: str = "dev",
    batch_size: int = 64,
) -> ClassifierModel:
    """Zero the gates of the floor(fraction * total_heads) least important heads.

    Ties break by (layer index, head index) ascending. Only currently
    active heads are candidates; asking for at least as many prunes as
    there are active heads is rejected.
    """
    fraction = float(fraction)
    if not 0.0 <= fraction < 1.0:
        raise InvalidConfig(f"prune fraction must be in [0, 1), got {fraction}")
    total = model.num_layers * model.num_heads
    n_prune = math.floor(fraction * total)
    out = model.clone(provenance=f"head_prune({model.provenance}, f={fraction})")
    if n_prune == 0:
        return out

    importance = head_importance(model, dataset, split=split, batch_size=batch_size)
    active = [
        (importance[li, hi], li, hi)
        for li in range(model.num_layers)
        for hi in range(model.num_heads)
        if model.layers[li].gates[hi] == 1.0
    ]
    if n_prune >= len(active):
        raise InvalidConfig(
            f"pruning {n_prune} of {len(active)} active heads would leave "
            "no attention anywhere"
        )
    active.sort()
    for _, li, hi in active[:n_prune]:
        out.layers[li].gates[hi] = 0.0
    return out
