"""Shared training loop and optimizer for every compression trainer.

All trainers funnel through :func:`run_training`: plain finetuning,
distillation (pure and patient), and quantization-aware training are the
same loop with different loss terms and forward flags. Batch order is
driven by a named RNG substream of the caller's seed, so two runs with
the same seed are bit-identical and adding an unrelated stage elsewhere
does not perturb batching here.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidConfig, InvalidInput
from ..losses import cross_entropy_op, kd_loss_op
from ..tensor import GradTape, Tensor, l2_normalize, mean, mul, sub
from ..model import ClassifierModel

_BATCH_STREAM = 0xBA7C4


class Adam:
    """Standard Adam: bias-corrected first and second moments."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise InvalidInput(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def encode_split(tokenizer, texts) -> tuple[np.ndarray, np.ndarray]:
    """Encode a whole split at one fixed width.

    A constant width means every batch sees the same padding, which
    keeps results independent of how examples land in batches.
    """
    return tokenizer.encode_batch(texts)


def _patient_term(student_hiddens, mapped_teacher) -> Tensor:
    """Mean squared distance of unit-normalized CLS states over mapped layers.

    ``mapped_teacher`` pairs a student layer index with that layer's
    target: the teacher CLS state, already unit-normalized, as a
    constant (no gradient flows into the teacher).
    """
    total = None
    for s_layer, t_norm in mapped_teacher:
        s_cls = l2_normalize(student_hiddens[s_layer][:, 0, :])
        diff = sub(s_cls, t_norm)
        term = mean(mul(diff, diff))
        total = term if total is None else total + term
    return mul(total, 1.0 / len(mapped_teacher))


def skip_layer_mapping(teacher_layers: int, student_layers: int) -> list[tuple[int, int]]:
    """Student layer i (1-indexed) learns from teacher layer i * (Lt/Ls)."""
    if student_layers < 1 or teacher_layers % student_layers != 0:
        raise InvalidConfig(
            f"no skip mapping from {teacher_layers} teacher layers onto "
            f"{student_layers} student layers"
        )
    ratio = teacher_layers // student_layers
    return [(i, i * ratio + (ratio - 1)) for i in range(student_layers)]


def run_training(
    model: ClassifierModel,
    ids: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    loss_choice: str = "cross-entropy",
    teacher: ClassifierModel | None = None,
    temperature: float = 10.0,
    alpha: float = 1.0,
    beta: float = 0.0,
    fake_quant: bool = False,
) -> list[float]:
    """Train ``model`` in place; returns mean loss per epoch.

    ``loss_choice`` is one of cross-entropy, kd, kd+ce. KD variants need
    ``teacher``; ``beta`` > 0 adds the hidden-state matching term with the
    skip layer mapping (patient distillation).
    """
    if loss_choice not in ("cross-entropy", "kd", "kd+ce"):
        raise InvalidConfig(f"unknown loss choice {loss_choice!r}")
    use_kd = loss_choice in ("kd", "kd+ce")
    if use_kd and teacher is None:
        raise InvalidConfig(f"loss {loss_choice!r} requires a teacher model")
    if beta > 0 and teacher is None:
        raise InvalidConfig("hidden-state matching requires a teacher model")
    if use_kd and teacher is not None and model.num_layers > teacher.num_layers:
        raise InvalidInput(
            f"student has {model.num_layers} layers, more than the "
            f"teacher's {teacher.num_layers}"
        )
    mapping = (
        skip_layer_mapping(teacher.num_layers, model.num_layers)
        if beta > 0 else []
    )
    # "kd" honors alpha as given (1.0 means no CE term at all);
    # "kd+ce" guarantees a CE share even if the caller left alpha at 1.
    if loss_choice == "kd+ce" and alpha >= 1.0:
        alpha = 0.5

    n = ids.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _BATCH_STREAM]))
    params = model.params()
    opt = Adam(params, lr=lr)
    history: list[float] = []

    for _ in range(int(epochs)):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            bids, bmask = ids[sel], mask[sel]

            t_logits = t_hidden = None
            if teacher is not None and (use_kd or mapping):
                t_out, t_states = teacher.forward_batch(bids, bmask)
                t_logits = t_out.data
                if mapping:
                    t_hidden = [
                        (s_i, l2_normalize(Tensor(t_states[t_i].data[:, 0, :])))
                        for s_i, t_i in mapping
                    ]

            with GradTape() as tape:
                tape.watch(params)
                logits, hiddens = model.forward_batch(bids, bmask, fake_quant=fake_quant)
                if loss_choice == "cross-entropy":
                    loss = cross_entropy_op(logits, labels[sel])
                else:
                    loss = mul(kd_loss_op(t_logits, logits, temperature), alpha)
                    if alpha < 1.0:
                        ce = cross_entropy_op(logits, labels[sel])
                        loss = loss + mul(ce, 1.0 - alpha)
                if mapping:
                    loss = loss + mul(_patient_term(hiddens, t_hidden), beta)
            grads = tape.gradients(loss)
            opt.step(grads)
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))
    return history


def finetune(
    model: ClassifierModel,
    dataset,
    epochs: int = 3,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
    split: str = "train",
) -> list[float]:
    """Cross-entropy finetuning on a dataset split, in place."""
    if model.tokenizer is None:
        raise InvalidInput("model needs a tokenizer to train on raw text")
    ids, mask = encode_split(model.tokenizer, dataset.texts(split))
    return run_training(
        model, ids, mask, dataset.labels(split),
        epochs=epochs, seed=seed, lr=lr, batch_size=batch_size,
    )
