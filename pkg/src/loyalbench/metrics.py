"""Loyalty metrics: how closely a compressed model tracks its source.

Label loyalty is the accuracy of student predictions measured against
teacher predictions instead of gold labels. Probability loyalty compares
full predicted distributions: per example, ``1 - sqrt(JS(P, Q))``, then
the dataset mean, reported as a percentage.

KL and JS here use base-2 logarithms by default so the Jensen-Shannon
divergence lands in [0, 1] and probability loyalty spans the full
[0, 100] range. Natural-log mode exists behind the ``base`` argument and
is flagged wherever reports carry these numbers. Note the training-side
KD loss in :mod:`loyalbench.losses` always uses natural logs; only the
evaluation metrics are switchable.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInput, UnstableTiming
from .losses import ProbVector

_EPS = 1e-12


def _as_dist(x, name: str) -> np.ndarray:
    if isinstance(x, ProbVector):
        return np.array(list(x), dtype=np.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInput(f"{name} must be a non-empty 1-D distribution")
    return arr


def kl_divergence(p, q, base: float = 2.0) -> float:
    """D_KL(p || q); terms where p is zero contribute nothing.

    If q has exact zeros on p's support, q is smoothed by adding 1e-12
    everywhere and renormalizing, so the result stays finite.
    """
    p_arr, q_arr = _as_dist(p, "p"), _as_dist(q, "q")
    if p_arr.shape != q_arr.shape:
        raise InvalidInput(
            f"dimension mismatch: {p_arr.shape} vs {q_arr.shape}"
        )
    if np.any((q_arr == 0) & (p_arr > 0)):
        q_arr = q_arr + _EPS
        q_arr = q_arr / q_arr.sum()
    support = p_arr > 0
    terms = p_arr[support] * (np.log(p_arr[support]) - np.log(q_arr[support]))
    return float(terms.sum() / math.log(base))


def js_divergence(p, q, base: float = 2.0) -> float:
    """Jensen-Shannon divergence; in [0, 1] with the default base-2 logs."""
    p_arr, q_arr = _as_dist(p, "p"), _as_dist(q, "q")
    if p_arr.shape != q_arr.shape:
        raise InvalidInput(
            f"dimension mismatch: {p_arr.shape} vs {q_arr.shape}"
        )
    m = 0.5 * (p_arr + q_arr)
    return 0.5 * kl_divergence(p_arr, m, base) + 0.5 * kl_divergence(q_arr, m, base)


def _js_rows(P: np.ndarray, Q: np.ndarray, base: float) -> np.ndarray:
    """Row-wise JS divergence for (n, classes) probability matrices."""
    M = 0.5 * (P + Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_pm = np.where(P > 0, P * (np.log(P) - np.log(M)), 0.0).sum(axis=1)
        kl_qm = np.where(Q > 0, Q * (np.log(Q) - np.log(M)), 0.0).sum(axis=1)
    js = 0.5 * (kl_pm + kl_qm) / math.log(base)
    # Rounding can leave a js of -1e-17, or 1 + 1e-16 on spiky rows;
    # clip to the mathematical range [0, log_base(2)].
    return np.clip(js, 0.0, math.log(2.0) / math.log(base))


@dataclass
class PredictionSet:
    """One model's predictions over one dataset split, in example order."""

    ids: list[str]
    labels: np.ndarray
    probs: np.ndarray
    provenance: str = "unknown"
    split: str = "unknown"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        n = len(self.ids)
        if self.probs.ndim != 2 or self.probs.shape[0] != n or self.labels.shape != (n,):
            raise InvalidInput(
                f"misaligned prediction set: {n} ids, labels {self.labels.shape}, "
                f"probs {self.probs.shape}"
            )
        row_sums = self.probs.sum(axis=1)
        if np.any(self.probs < -1e-12) or np.abs(row_sums - 1.0).max() > 1e-6:
            raise InvalidInput("probability rows must be normalized distributions")
        if not np.array_equal(self.labels, self.probs.argmax(axis=1)):
            raise InvalidInput("labels must equal the argmax of their probabilities")

    @classmethod
    def from_probs(cls, ids, probs, provenance="unknown", split="unknown"):
        probs = np.asarray(probs, dtype=np.float64)
        return cls(list(ids), probs.argmax(axis=1), probs, provenance, split)

    def __len__(self) -> int:
        return len(self.ids)

    def prob_vector(self, i: int) -> ProbVector:
        return ProbVector(self.probs[i])

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, ex_id in enumerate(self.ids):
                fh.write(json.dumps({
                    "id": ex_id,
                    "label": int(self.labels[i]),
                    "probs": [float(v) for v in self.probs[i]],
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path: str, provenance="external", split="unknown"):
        ids, labels, probs = [], [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                ids.append(row["id"])
                labels.append(row["label"])
                probs.append(row["probs"])
        return cls(ids, np.array(labels), np.array(probs), provenance, split)


def _check_aligned(teacher: PredictionSet, student: PredictionSet) -> None:
    if len(teacher) != len(student):
        raise InvalidInput(
            f"prediction sets differ in size: {len(teacher)} vs {len(student)}"
        )
    for a, b in zip(teacher.ids, student.ids):
        if a != b:
            raise InvalidInput(f"example id mismatch: {a!r} vs {b!r}")


def label_loyalty(teacher: PredictionSet, student: PredictionSet) -> float:
    """Percent of examples where student and teacher predict the same label."""
    _check_aligned(teacher, student)
    return float(100.0 * (teacher.labels == student.labels).mean())


def probability_loyalty(
    teacher: PredictionSet, student: PredictionSet, base: float = 2.0
) -> float:
    """Mean over examples of 1 - sqrt(JS(teacher, student)), as a percent."""
    _check_aligned(teacher, student)
    js = _js_rows(teacher.probs, student.probs, base)
    return float(100.0 * (1.0 - np.sqrt(js)).mean())


def per_example_lp(
    teacher: PredictionSet, student: PredictionSet, base: float = 2.0
) -> np.ndarray:
    """Per-example probability loyalty in [0, 1]."""
    _check_aligned(teacher, student)
    return 1.0 - np.sqrt(_js_rows(teacher.probs, student.probs, base))


def accuracy(predictions: PredictionSet, gold: Sequence[int]) -> float:
    """Percent of predicted labels matching gold labels."""
    gold_arr = np.asarray(gold, dtype=np.int64)
    if gold_arr.shape != predictions.labels.shape:
        raise InvalidInput(
            f"gold labels length {gold_arr.shape} does not match "
            f"{predictions.labels.shape} predictions"
        )
    return float(100.0 * (predictions.labels == gold_arr).mean())


@dataclass
class LoyaltyReport:
    label_loyalty: float
    probability_loyalty: float
    accuracy: float
    n_examples: int
    lp_min: float
    lp_median: float
    lp_max: float
    log_base: float = 2.0

    def __post_init__(self):
        for name in ("label_loyalty", "probability_loyalty", "accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise InvalidInput(f"{name} {v} outside [0, 100]")

    def as_dict(self) -> dict:
        return {
            "label_loyalty": self.label_loyalty,
            "probability_loyalty": self.probability_loyalty,
            "accuracy": self.accuracy,
            "n_examples": self.n_examples,
            "lp_min": self.lp_min,
            "lp_median": self.lp_median,
            "lp_max": self.lp_max,
            "log_base": self.log_base,
        }


def loyalty_report(
    teacher: PredictionSet,
    student: PredictionSet,
    gold: Sequence[int],
    base: float = 2.0,
) -> LoyaltyReport:
    lp = per_example_lp(teacher, student, base)
    return LoyaltyReport(
        label_loyalty=label_loyalty(teacher, student),
        probability_loyalty=float(100.0 * lp.mean()),
        accuracy=accuracy(student, gold),
        n_examples=len(student),
        lp_min=float(lp.min()),
        lp_median=float(np.median(lp)),
        lp_max=float(lp.max()),
        log_base=base,
    )


@dataclass
class SpeedupResult:
    ratio: float
    runs: int
    reference_median: float
    candidate_median: float
    reference_spread: float
    candidate_spread: float
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "runs": self.runs,
            "reference_median": self.reference_median,
            "candidate_median": self.candidate_median,
            "reference_spread": self.reference_spread,
            "candidate_spread": self.candidate_spread,
            "warnings": list(self.warnings),
        }


def _timed_pass(model, ids, mask) -> float:
    t0 = time.perf_counter()
    model.forward_batch(ids, mask)
    return time.perf_counter() - t0


def _iqr_spread(times: np.ndarray) -> float:
    q75, q25 = np.percentile(times, [75, 25])
    return float((q75 - q25) / np.median(times))


def measure_speedup(
    reference,
    candidate,
    batch: tuple[np.ndarray, np.ndarray],
    runs: int = 30,
    warmup: int = 5,
) -> SpeedupResult:
    """Wall-clock ratio reference/candidate on a fixed batch.

    Each model is timed ``runs`` times (at least 30) after ``warmup``
    discarded passes, with reference and candidate passes interleaved so
    machine-level slowdowns hit both series alike; the ratio uses
    medians. Spread is the interquartile range over the median; if
    either model's spread exceeds 20%, the result carries an
    ``UnstableTiming`` warning (also emitted via :mod:`warnings`).
    """
    if runs < 30:
        raise InvalidInput(f"need at least 30 timed runs, got {runs}")
    ids, mask = batch
    for _ in range(warmup):
        reference.forward_batch(ids, mask)
        candidate.forward_batch(ids, mask)
    ref_times = np.empty(runs)
    cand_times = np.empty(runs)
    for i in range(runs):
        ref_times[i] = _timed_pass(reference, ids, mask)
        cand_times[i] = _timed_pass(candidate, ids, mask)

    ref_med = float(np.median(ref_times))
    cand_med = float(np.median(cand_times))
    out = SpeedupResult(
        ratio=ref_med / cand_med,
        runs=runs,
        reference_median=ref_med,
        candidate_median=cand_med,
        reference_spread=_iqr_spread(ref_times),
        candidate_spread=_iqr_spread(cand_times),
    )
    for name, spread in (
        ("reference", out.reference_spread),
        ("candidate", out.candidate_spread),
    ):
        if spread > 0.20:
            msg = f"{name} timing spread {spread:.1%} exceeds 20% of median"
            out.warnings.append(msg)
            warnings.warn(msg, UnstableTiming)
    return out
