"""Black-box word-substitution attack with exact query accounting.

The attacker sees only class probabilities, one query per text scored.
For each example it first checks the clean prediction (one query),
ranks word positions by how much deleting each word lowers the true
class probability (one query per word), then walks positions from most
to least damaging, substituting embedding-neighbor synonyms. At each
position the candidate that lowers the true-class probability the most
is kept, provided it lowers it strictly; the attack succeeds the
moment the predicted label flips.

Already-misclassified examples are recorded as not attacked: they cost
exactly the one clean-check query and count as wrong both before and
after.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingTable
from .errors import FormatError, InvalidInput
from .model import ClassifierModel, predict_probs


@dataclass
class SynonymTable:
    """Word → ranked candidate substitutes, most similar first."""

    candidates: dict[str, list[str]]

    def __post_init__(self):
        vocab = set(self.candidates)
        for word, cands in self.candidates.items():
            if word in cands:
                raise InvalidInput(f"word {word!r} listed as its own candidate")
            missing = [c for c in cands if c not in vocab]
            if missing:
                raise InvalidInput(
                    f"candidate {missing[0]!r} for {word!r} is out of vocabulary"
                )

    def for_word(self, word: str) -> list[str]:
        return self.candidates.get(word, [])


def build_synonym_table(
    embeddings: EmbeddingTable, k: int = 8, min_cosine: float = 0.5
) -> SynonymTable:
    """Nearest in-vocabulary neighbors per word, thresholded by cosine.

    Rows of ``embeddings`` are unit vectors, so cosine similarity is the
    plain dot product. Ties in similarity resolve to the lower word
    index, which is deterministic for a fixed table.
    """
    words = embeddings.words
    if not words:
        raise InvalidInput("embedding table has an empty vocabulary")
    if k < 0:
        raise InvalidInput(f"candidate count k must be >= 0, got {k}")
    sims = embeddings.vectors @ embeddings.vectors.T
    np.fill_diagonal(sims, -np.inf)
    table: dict[str, list[str]] = {}
    for i, word in enumerate(words):
        order = np.argsort(-sims[i], kind="stable")[:k]
        table[word] = [words[j] for j in order if sims[i, j] >= min_cosine]
    return SynonymTable(table)


class BlackBoxModel:
    """Probability-only view of a classifier with a query counter.

    One query is one text scored; batched calls count one query per
    text. Workers attacking disjoint examples can each own a counter
    and merge by summation. Accepts a :class:`ClassifierModel` or any
    object with its own ``predict_probs(texts)`` method.
    """

    def __init__(self, model):
        self._model = model
        self.queries = 0

    def _score(self, texts: list[str]) -> np.ndarray:
        fn = getattr(self._model, "predict_probs", None)
        if callable(fn):
            return np.asarray(fn(texts))
        return predict_probs(self._model, texts)

    def predict_one(self, text: str) -> np.ndarray:
        self.queries += 1
        return self._score([text])[0]

    def predict_many(self, texts: list[str]) -> np.ndarray:
        self.queries += len(texts)
        return self._score(list(texts))


@dataclass
class AttackOutcome:
    example_id: str
    originally_correct: bool
    success: bool
    perturbed_text: str
    n_queries: int
    words_changed: int

    def __post_init__(self):
        if self.n_queries < 1:
            raise InvalidInput(
                f"outcome for {self.example_id!r} reports {self.n_queries} queries"
            )
        if self.success and not self.originally_correct:
            raise InvalidInput(
                f"outcome for {self.example_id!r} claims success on an example "
                "that was already misclassified"
            )

    def as_dict(self) -> dict:
        return {
            "id": self.example_id,
            "originally_correct": self.originally_correct,
            "success": self.success,
            "perturbed_text": self.perturbed_text,
            "n_queries": self.n_queries,
            "words_changed": self.words_changed,
        }


def rank_word_importance(model, example) -> list[int]:
    """Word positions ordered most-damaging-to-delete first.

    The clean probability is constant across probes, so ordering by the
    drop it suffers equals ordering by the deleted-text true-class
    probability ascending; that needs exactly one query per word. Ties
    keep the original word order (a constant model yields positions
    0..n-1 unchanged).
    """
    proxy = model if isinstance(model, BlackBoxModel) else BlackBoxModel(model)
    words = example.text.split()
    if not words:
        return []
    if len(words) == 1:
        proxy.predict_one("")
        return [0]
    probes = [
        " ".join(words[:i] + words[i + 1 :]) for i in range(len(words))
    ]
    deleted = proxy.predict_many(probes)[:, example.label]
    return list(np.argsort(deleted, kind="stable"))


def attack_example(
    model, example, table: SynonymTable, max_candidates: int = 8
) -> AttackOutcome:
    """Greedy substitution attack against one example.

    ``model`` may be a :class:`ClassifierModel` or an already-wrapped
    :class:`BlackBoxModel`; the reported query count covers exactly the
    invocations made for this example.

    At every position the current text is re-scored in the same batch as
    its candidate variants, so the accept decision compares numbers
    produced under identical serving conditions. Against a model with
    batch-dynamic int8 activations this matters: a substitution whose
    effect is smaller than the batch's shared quantization step comes
    back with exactly the current probability and is rejected, because a
    tie is not a reduction. Float models return bit-identical values for
    the re-scored text, so their outcomes do not depend on the re-score.
    """
    proxy = model if isinstance(model, BlackBoxModel) else BlackBoxModel(model)
    start = proxy.queries
    clean = proxy.predict_one(example.text)
    if int(np.argmax(clean)) != example.label:
        return AttackOutcome(
            example_id=example.id, originally_correct=False, success=False,
            perturbed_text=example.text, n_queries=proxy.queries - start,
            words_changed=0,
        )

    target = example.label
    words = example.text.split()
    positions = rank_word_importance(proxy, example)
    changed = 0
    success = False

    for pos in positions:
        cands = table.for_word(words[pos])[:max_candidates]
        if not cands:
            continue
        variants = [" ".join(words)]
        for cand in cands:
            words_try = list(words)
            words_try[pos] = cand
            variants.append(" ".join(words_try))
        probs = proxy.predict_many(variants)
        current_prob = probs[0, target]
        target_probs = probs[1:, target]
        best = int(np.argmin(target_probs))
        if target_probs[best] < current_prob:
            words[pos] = cands[best]
            changed += 1
            if int(np.argmax(probs[best + 1])) != target:
                success = True
                break

    return AttackOutcome(
        example_id=example.id, originally_correct=True, success=success,
        perturbed_text=" ".join(words), n_queries=proxy.queries - start,
        words_changed=changed,
    )


@dataclass
class RobustnessReport:
    """Split-level summary of an attack run."""

    after_attack_accuracy: float
    clean_accuracy: float
    success_rate: float
    mean_query_number: float
    mean_query_number_all: float
    mean_perturbation: float
    n_examples: int
    n_attacked: int
    n_successes: int

    def __post_init__(self):
        if self.after_attack_accuracy > self.clean_accuracy + 1e-9:
            raise InvalidInput(
                "after-attack accuracy exceeds clean accuracy "
                f"({self.after_attack_accuracy} > {self.clean_accuracy})"
            )

    def as_dict(self) -> dict:
        return {
            "after_attack_accuracy": self.after_attack_accuracy,
            "clean_accuracy": self.clean_accuracy,
            "success_rate": self.success_rate,
            "mean_query_number": self.mean_query_number,
            "mean_query_number_all": self.mean_query_number_all,
            "mean_perturbation": self.mean_perturbation,
            "n_examples": self.n_examples,
            "n_attacked": self.n_attacked,
            "n_successes": self.n_successes,
        }


def evaluate_robustness(
    model: ClassifierModel,
    dataset,
    table: SynonymTable,
    split: str = "test",
    max_candidates: int = 8,
    max_examples: int | None = None,
) -> tuple[RobustnessReport, list[AttackOutcome]]:
    """Attack every example of a split and aggregate the outcomes.

    Accuracy percentages are over all (possibly capped) examples;
    ``mean_query_number`` averages over attacked examples only, while
    ``mean_query_number_all`` includes the one-query misclassified
    ones. ``mean_perturbation`` is the mean changed-word fraction over
    successful attacks.
    """
    examples = dataset.split(split)
    if max_examples is not None:
        examples = examples[:max_examples]
    if not examples:
        raise InvalidInput(f"split {split!r} has no examples to attack")

    outcomes = [
        attack_example(model, e, table, max_candidates=max_candidates)
        for e in examples
    ]
    n = len(outcomes)
    attacked = [o for o in outcomes if o.originally_correct]
    successes = [o for o in attacked if o.success]
    still_correct = sum(1 for o in attacked if not o.success)
    perturbations = [
        o.words_changed / max(1, len(e.text.split()))
        for e, o in zip(examples, outcomes)
        if o.success
    ]
    report = RobustnessReport(
        after_attack_accuracy=100.0 * still_correct / n,
        clean_accuracy=100.0 * len(attacked) / n,
        success_rate=(
            100.0 * len(successes) / len(attacked) if attacked else 0.0
        ),
        mean_query_number=(
            float(np.mean([o.n_queries for o in attacked])) if attacked else 0.0
        ),
        mean_query_number_all=float(np.mean([o.n_queries for o in outcomes])),
        mean_perturbation=(
            float(np.mean(perturbations)) if perturbations else 0.0
        ),
        n_examples=n,
        n_attacked=len(attacked),
        n_successes=len(successes),
    )
    return report, outcomes


def save_outcomes(outcomes: list[AttackOutcome], path: str) -> None:
    """One JSON object per line, in attack order."""
    with open(path, "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.as_dict()) + "\n")


def load_outcomes(path: str) -> list[AttackOutcome]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError("bad JSON in outcome file", line=lineno) from exc
            try:
                out.append(
                    AttackOutcome(
                        example_id=d["id"],
                        originally_correct=d["originally_correct"],
                        success=d["success"],
                        perturbed_text=d["perturbed_text"],
                        n_queries=d["n_queries"],
                        words_changed=d["words_changed"],
                    )
                )
            except KeyError as exc:
                raise FormatError(
                    f"outcome record missing field {exc.args[0]!r}", line=lineno
                ) from exc
    return out
