"""Knowledge distillation: pure (logit matching) and patient variants.

Pure distillation trains the student on the temperature-softened KL
loss against teacher logits, optionally mixed with cross-entropy via
``alpha``. The patient variant additionally pulls each mapped student
layer's CLS hidden state toward the teacher's, after unit
normalization, weighted by ``beta`` ("skip" mapping: student layer i
matches teacher layer i * Lt/Ls, 1-indexed).
"""

from __future__ import annotations

from ..errors import InvalidConfig, InvalidInput
from ..model import ClassifierModel
from .trainer import encode_split, run_training, skip_layer_mapping


def distill(
    teacher: ClassifierModel,
    student_init: ClassifierModel,
    dataset,
    variant: str = "pure",
    temperature: float = 10.0,
    alpha: float = 1.0,
    beta: float = 500.0,
    epochs: int = 3,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> tuple[ClassifierModel, list[float]]:
    """Distill ``teacher`` into a copy of ``student_init``.

    Returns the trained student and per-epoch loss history. The teacher
    is read-only; no gradient ever reaches it.
    """
    if variant not in ("pure", "patient"):
        raise InvalidConfig(f"unknown distillation variant {variant!r}")
    if student_init.num_layers > teacher.num_layers:
        raise InvalidInput(
            f"student has {student_init.num_layers} layers, more than the "
            f"teacher's {teacher.num_layers}"
        )
    beta_eff = beta if variant == "patient" else 0.0
    if beta_eff > 0:
        # Surface an unusable layer mapping before any training happens.
        skip_layer_mapping(teacher.num_layers, student_init.num_layers)

    student = student_init.clone(
        provenance=f"{variant}_kd({student_init.provenance})"
    )
    if student.tokenizer is None:
        raise InvalidInput("student needs a tokenizer to train on raw text")
    ids, mask = encode_split(student.tokenizer, dataset.texts("train"))
    history = run_training(
        student, ids, mask, dataset.labels("train"),
        epochs=epochs, seed=seed, lr=lr, batch_size=batch_size,
        loss_choice="kd", teacher=teacher,
        temperature=temperature, alpha=alpha, beta=beta_eff,
    )
    return student, history
