"""Classification losses and the probability-vector type.

Two API levels live here. The plain functions (:func:`softmax`,
:func:`cross_entropy`, :func:`kd_loss`) take float sequences and return
loss plus analytic gradient; they are the reference math and what the
metrics and tests consume. The ``*_op`` variants are the same math as
taped batch operations for the trainers.

Divergence convention: the distillation loss uses natural-log KL (the
usual training convention); the loyalty metrics use their own base-2
divergences and do not go through this module.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidInput
from .tensor import Tensor, _apply, ensure_finite


class ProbVector:
    """A normalized categorical distribution over class labels."""

    __slots__ = ("probs",)

    def __init__(self, probs: Sequence[float]):
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidInput("probabilities must be a non-empty 1-D sequence")
        if np.any(arr < -1e-12) or np.any(arr > 1.0 + 1e-12):
            raise InvalidInput("probabilities must lie in [0, 1]")
        total = float(arr.sum())
        if abs(total - 1.0) > 1e-9:
            raise InvalidInput(f"probabilities must sum to 1, got {total!r}")
        self.probs = np.clip(arr, 0.0, 1.0)

    def __len__(self) -> int:
        return self.probs.size

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])

    def __iter__(self):
        return iter(self.probs.tolist())

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def __repr__(self) -> str:
        return f"ProbVector({np.round(self.probs, 6).tolist()})"


def _softmax_raw(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Sequence[float], temperature: float = 1.0) -> ProbVector:
    """Temperature-rescaled softmax with max-subtraction for stability."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise InvalidInput("logits must be a non-empty 1-D sequence")
    ensure_finite("logits", z)
    if not temperature > 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    return ProbVector(_softmax_raw(z / temperature))


def cross_entropy(
    logits: Sequence[float], target: int
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` plus gradient w.r.t. logits.

    gradient = softmax(logits) - one_hot(target).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise InvalidInput("logits must be a non-empty 1-D sequence")
    ensure_finite("logits", z)
    target = int(target)
    if not 0 <= target < z.size:
        raise InvalidInput(f"target {target} out of range for {z.size} classes")
    p = _softmax_raw(z)
    # -log p[target], computed from shifted logits to avoid log(0)
    shifted = z - z.max()
    loss = float(np.log(np.exp(shifted).sum()) - shifted[target])
    grad = p.copy()
    grad[target] -= 1.0
    return loss, grad


def kd_loss(
    teacher_logits: Sequence[float],
    student_logits: Sequence[float],
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Distillation loss T^2 * KL(p_teacher || p_student) on softened logits.

    The teacher side is a constant: the returned gradient is w.r.t. the
    student logits only, T * (p_student - p_teacher).
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 1 or t.size == 0:
        raise InvalidInput(
            f"teacher/student logits must be equal-length 1-D, got {t.shape} and {s.shape}"
        )
    ensure_finite("teacher logits", t)
    ensure_finite("student logits", s)
    if not temperature > 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    T = float(temperature)
    p = _softmax_raw(t / T)
    q = _softmax_raw(s / T)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    loss = T * T * float(terms.sum())
    grad = T * (q - p)
    return loss, grad


# ---------------------------------------------------------------------------
# taped batch variants


def cross_entropy_op(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over a (batch, classes) logit tensor."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise InvalidInput("expected (batch, classes) logits and (batch,) targets")
    if targets.min() < 0 or targets.max() >= z.shape[1]:
        raise InvalidInput("target out of range")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - shifted[np.arange(n), targets]).mean())
    p = _softmax_raw(z)

    def bwd(g):
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        return (g * grad / n,)

    return _apply([logits], np.float64(loss), bwd)


def kd_loss_op(
    teacher_logits: np.ndarray, student_logits: Tensor, temperature: float
) -> Tensor:
    """Mean distillation loss over a batch; teacher logits are constants."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = student_logits.data
    if t.shape != s.shape or t.ndim != 2:
        raise InvalidInput(
            f"teacher/student logit shapes must match, got {t.shape} and {s.shape}"
        )
    if not temperature > 0:
        raise InvalidInput(f"temperature must be positive, got {temperature}")
    T = float(temperature)
    n = s.shape[0]
    p = _softmax_raw(t / T)
    q = _softmax_raw(s / T)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    loss = T * T * float(terms.sum(axis=1).mean())

    def bwd(g):
        return (g * T * (q - p) / n,)

    return _apply([student_logits], np.float64(loss), bwd)
