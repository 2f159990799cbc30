"""Bridge from models to prediction sets the metrics consume."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput
from .metrics import PredictionSet
from .model import ClassifierModel, predict_probs


def predict_set(
    model: ClassifierModel,
    dataset,
    split: str = "test",
    batch_size: int = 256,
) -> PredictionSet:
    """Run the model over one split and package ids, labels, and probs."""
    examples = dataset.split(split)
    if not examples:
        raise InvalidInput(f"split {split!r} is empty")
    texts = [e.text for e in examples]
    chunks = [
        predict_probs(model, texts[i : i + batch_size])
        for i in range(0, len(texts), batch_size)
    ]
    return PredictionSet.from_probs(
        [e.id for e in examples],
        np.concatenate(chunks, axis=0),
        provenance=model.provenance,
        split=split,
    )
