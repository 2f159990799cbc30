"""Progressive module replacing: train a half-depth successor in place.

Each successor layer stands in for a 2-layer block of the frozen
teacher. During training every successor layer independently replaces
its block with probability p(t) = min(1, b + k*t), rising linearly in
the step count; once the schedule saturates, a post phase finetunes the
successor-only model. Successor layers start from the lower teacher
layer of their block.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidConfig, InvalidInput
from ..losses import cross_entropy_op, kd_loss_op
from ..model import ClassifierModel
from ..tensor import GradTape, Tensor, add, embedding, mul
from .trainer import Adam, encode_split, run_training

_DRAW_STREAM = 0x7E5E05


@dataclass
class ReplacementSchedule:
    """Linear replacement curriculum p(t) = min(1, b + k*t)."""

    b: float = 0.5
    k: float = 0.002
    t: int = 0

    def __post_init__(self):
        if not 0.0 <= self.b <= 1.0:
            raise InvalidConfig(f"base probability b={self.b} outside [0, 1]")
        if self.k < 0:
            raise InvalidConfig(f"increment k={self.k} must be non-negative")

    def p(self, t: int | None = None) -> float:
        t = self.t if t is None else t
        return min(1.0, max(0.0, self.b + self.k * t))

    def draw(self, rng: np.random.Generator, n_layers: int) -> np.ndarray:
        """Independent per-layer replacement decisions at the current step."""
        return rng.random(n_layers) < self.p()

    def advance(self) -> None:
        self.t += 1


def _hybrid_forward(successor, teacher, replace, ids, mask):
    """Forward through successor layer i or teacher block (2i, 2i+1)."""
    seq = ids.shape[1]
    mask3 = mask[:, :, None]
    attn_bias = ((mask - 1.0) * 1e9)[:, None, None, :]
    x = add(
        embedding(successor.tok_emb, ids),
        embedding(successor.pos_emb, np.arange(seq)),
    )
    for i, layer in enumerate(successor.layers):
        if replace[i]:
            x = successor._layer_forward(
                layer, x, attn_bias, mask3, Tensor(layer.gates), False
            )
        else:
            for t_layer in teacher.layers[2 * i : 2 * i + 2]:
                x = teacher._layer_forward(
                    t_layer, x, attn_bias, mask3, Tensor(t_layer.gates), False
                )
    cls = x[:, 0, :]
    return successor._linear(cls, successor.head_w, successor.head_b, None, False)


def theseus_train(
    teacher: ClassifierModel,
    dataset,
    schedule: ReplacementSchedule | None = None,
    loss_choice: str = "cross-entropy",
    epochs: int = 2,
    post_epochs: int = 2,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> tuple[ClassifierModel, list[float]]:
    """Compress ``teacher`` to half depth by progressive replacement.

    Returns the successor model (teacher_layers / 2 layers) and the
    per-epoch loss history across both phases. The teacher is frozen
    throughout; during the replacement phase only successor layers
    train, the post phase finetunes the whole successor.
    """
    if teacher.num_layers % 2 != 0:
        raise InvalidConfig(
            f"module replacing needs an even layer count, got {teacher.num_layers}"
        )
    if loss_choice not in ("cross-entropy", "kd", "kd+ce"):
        raise InvalidConfig(f"unknown loss choice {loss_choice!r}")
    if teacher.is_quantized():
        raise InvalidConfig("module replacing trains in float; dequantize first")
    if teacher.tokenizer is None:
        raise InvalidInput("teacher needs a tokenizer to train on raw text")
    schedule = schedule if schedule is not None else ReplacementSchedule()
    use_kd = loss_choice in ("kd", "kd+ce")
    alpha = 0.5 if loss_choice == "kd+ce" else 1.0

    successor = teacher.clone(provenance=f"theseus({teacher.provenance})")
    successor.layers = [
        copy.deepcopy(teacher.layers[2 * i])
        for i in range(teacher.num_layers // 2)
    ]

    ids, mask = encode_split(teacher.tokenizer, dataset.texts("train"))
    labels = dataset.labels("train")
    n = ids.shape[0]
    draw_rng = np.random.default_rng(np.random.SeedSequence([int(seed), _DRAW_STREAM]))
    batch_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA7C4]))

    layer_params = [p for layer in successor.layers for p in layer.params()]
    opt = Adam(layer_params, lr=lr)
    history: list[float] = []

    for _ in range(int(epochs)):
        order = batch_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            bids, bmask = ids[sel], mask[sel]
            replace = schedule.draw(draw_rng, len(successor.layers))
            schedule.advance()

            t_logits = None
            if use_kd:
                t_out, _ = teacher.forward_batch(bids, bmask)
                t_logits = t_out.data

            def batch_loss():
                logits = _hybrid_forward(successor, teacher, replace, bids, bmask)
                if use_kd:
                    loss = mul(kd_loss_op(t_logits, logits, 10.0), alpha)
                    if alpha < 1.0:
                        loss = loss + mul(
                            cross_entropy_op(logits, labels[sel]), 1.0 - alpha
                        )
                    return loss
                return cross_entropy_op(logits, labels[sel])

            if replace.any():
                with GradTape() as tape:
                    tape.watch(layer_params)
                    loss = batch_loss()
                opt.step(tape.gradients(loss))
            else:
                # all-teacher forward: the loss cannot depend on any
                # successor layer, so there is no step to take
                loss = batch_loss()
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))

    if post_epochs > 0:
        history += run_training(
            successor, ids, mask, labels,
            epochs=post_epochs, seed=seed + 1, lr=lr, batch_size=batch_size,
            loss_choice=loss_choice, teacher=teacher if use_kd else None,
            temperature=10.0, alpha=alpha,
        )
    return successor, history
