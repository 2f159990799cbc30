import numpy as np
import pytest

from loyalbench.compress import finetune
from loyalbench.data import generate_synthetic
from loyalbench.model import ClassifierModel, Tokenizer


@pytest.fixture(scope="session")
def tiny():
    """A small trained 4-layer teacher plus its dataset.

    Shared across test modules to amortize training time. Treat both as
    read-only; clone the model before mutating it.
    """
    ds = generate_synthetic(seed=3, n_examples=600, n_classes=4)
    tok = Tokenizer.build(
        [e.text for e in ds.split("train")], max_vocab=600, max_len=32
    )
    teacher = ClassifierModel(
        vocab_size=tok.vocab_size, num_classes=4, hidden=32, num_heads=4,
        num_layers=4, ffn=64, max_len=32, seed=0, tokenizer=tok,
        provenance="teacher",
    )
    finetune(teacher, ds, epochs=2, seed=0)
    return ds, teacher


@pytest.fixture()
def frozen_teacher_guard(tiny):
    """Snapshot the shared teacher's weights and verify they survive the test."""
    _, teacher = tiny
    before = [p.data.copy() for p in teacher.params()]
    yield teacher
    after = teacher.params()
    assert all(np.array_equal(b, a.data) for b, a in zip(before, after)), (
        "test mutated the shared teacher fixture"
    )
