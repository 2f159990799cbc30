"""Dataset generation, ingestion, and embedding training.

The synthetic task is a 3-class premise/hypothesis classification with
class-indicative lexical patterns plus distractor noise. Each signal
concept has a strong form and a weak (nearly class-neutral) form used in
the same slots, and a companion word that co-occurs with both; the
strong/weak pairs are planted synonyms, exported in the dataset
provenance so the attack has a guaranteed, measurable attack surface.

Label noise: with probability ``P_CONFUSE`` a sentence is emitted from a
different class's distribution than its label, so Bayes-optimal accuracy
on the generator is capped near ``1 - P_CONFUSE`` (~92%).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInput

# Emission constants. Chosen so that attacks must accumulate several
# strong-to-weak swaps to flip a prediction; see README for the rationale.
P_CONFUSE = 0.08
CONCEPTS_PER_CLASS = 18
N_FILLERS = 50
N_CONNECTORS = 4
SIGNAL_SLOTS = (7, 11)
P_OWN_CONCEPT = 0.72
P_STRONG_OWN = 0.70
P_STRONG_DISTRACT = 0.12
P_COMPANION = 0.55
P_FILLER_BEFORE = 0.35

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class Example:
    id: str
    text: str
    label: int
    split: str


@dataclass
class TextDataset:
    examples: list[Example]
    label_names: list[str]
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def split(self, name: str) -> list[Example]:
        return [e for e in self.examples if e.split == name]

    def texts(self, split: str) -> list[str]:
        return [e.text for e in self.split(split)]

    def labels(self, split: str) -> np.ndarray:
        return np.array([e.label for e in self.split(split)], dtype=np.int64)

    def validate(self) -> None:
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise InvalidInput("example ids are not unique")
        for e in self.examples:
            if not 0 <= e.label < self.num_classes:
                raise InvalidInput(f"label {e.label} out of range for example {e.id}")
            if e.split not in ("train", "dev", "test"):
                raise InvalidInput(f"unknown split {e.split!r} for example {e.id}")


def _pseudo_words(rng: np.random.Generator, count: int, syllables: int, taken: set[str]):
    """Unique pronounceable pseudo-words, deterministic under the rng."""
    words = []
    while len(words) < count:
        w = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _assign_splits(
    n: int,
    rng: np.random.Generator,
    dev_frac: float = 1 / 12,
    test_frac: float = 1 / 12,
) -> list[str]:
    """Shuffled train/dev/test assignment; dev/test may be empty at tiny n."""
    n_dev = round(n * dev_frac)
    n_test = round(n * test_frac)
    n_train = n - n_dev - n_test
    if n_train < 1:
        raise InvalidInput(f"{n} examples is too small for train/dev/test splits")
    splits = ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test
    perm = rng.permutation(n)
    return [splits[i] for i in perm]


def generate_synthetic(seed: int, n_examples: int, n_classes: int = 3) -> TextDataset:
    """Deterministic synthetic premise/hypothesis classification task."""
    if n_examples < 100:
        raise InvalidInput(f"need at least 100 examples, got {n_examples}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5DA7A]))
    taken: set[str] = set()
    n_concepts = n_classes * CONCEPTS_PER_CLASS
    strong = _pseudo_words(rng, n_concepts, 3, taken)
    weak = _pseudo_words(rng, n_concepts, 3, taken)
    companions = _pseudo_words(rng, n_concepts, 2, taken)
    fillers = _pseudo_words(rng, N_FILLERS, 2, taken)
    connectors = _pseudo_words(rng, N_CONNECTORS, 2, taken)
    concept_class = np.repeat(np.arange(n_classes), CONCEPTS_PER_CLASS)

    labels = np.array([i % n_classes for i in range(n_examples)], dtype=np.int64)
    rng.shuffle(labels)
    splits = _assign_splits(n_examples, rng)

    examples = []
    for i in range(n_examples):
        label = int(labels[i])
        emit_class = label
        if rng.random() < P_CONFUSE:
            others = [c for c in range(n_classes) if c != label]
            emit_class = int(others[rng.integers(len(others))])

        n_slots = int(rng.integers(SIGNAL_SLOTS[0], SIGNAL_SLOTS[1] + 1))
        tokens: list[str] = [fillers[rng.integers(N_FILLERS)]]
        connector_at = n_slots // 2
        for s in range(n_slots):
            if s == connector_at:
                tokens.append(connectors[rng.integers(N_CONNECTORS)])
            if rng.random() < P_FILLER_BEFORE:
                tokens.append(fillers[rng.integers(N_FILLERS)])
            if rng.random() < P_OWN_CONCEPT:
                own = np.flatnonzero(concept_class == emit_class)
                k = int(own[rng.integers(own.size)])
                p_strong = P_STRONG_OWN
            else:
                other = np.flatnonzero(concept_class != emit_class)
                k = int(other[rng.integers(other.size)])
                p_strong = P_STRONG_DISTRACT
            tokens.append(strong[k] if rng.random() < p_strong else weak[k])
            if rng.random() < P_COMPANION:
                tokens.append(companions[k])
        tokens.append(fillers[rng.integers(N_FILLERS)])

        examples.append(
            Example(id=f"syn-{i:06d}", text=" ".join(tokens), label=label, split=splits[i])
        )

    ds = TextDataset(
        examples=examples,
        label_names=[f"class_{c}" for c in range(n_classes)],
        provenance={
            "source": "synthetic",
            "seed": int(seed),
            "n_examples": n_examples,
            "n_classes": n_classes,
            "bayes_ceiling": 1.0 - P_CONFUSE,
            "planted_synonyms": [[strong[k], weak[k]] for k in range(n_concepts)],
        },
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# ingestion


def ingest(path: str, format: str = "csv") -> TextDataset:
    """Read a labeled text dataset from csv or jsonl.

    Expected fields: ``text``, ``label``, optional ``id`` and ``split``.
    Missing ids are assigned sequentially; missing splits get a seeded
    10:1:1 assignment. Labels are either non-negative integers or
    strings (mapped to indices alphabetically).
    """
    if format not in ("csv", "jsonl"):
        raise InvalidInput(f"unknown format {format!r}")
    rows: list[tuple[int, dict]] = []
    if format == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "text" not in reader.fieldnames or "label" not in reader.fieldnames:
                raise FormatError("csv must have 'text' and 'label' columns", line=1)
            for lineno, row in enumerate(reader, start=2):
                rows.append((lineno, row))
    else:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"bad json: {exc.msg}", line=lineno) from exc
                rows.append((lineno, row))

    if not rows:
        raise FormatError("no data rows", line=1)

    raw_labels = []
    for lineno, row in rows:
        if row.get("text") in (None, ""):
            raise FormatError("row missing text", line=lineno)
        if row.get("label") in (None, ""):
            raise FormatError("row missing label", line=lineno)
        raw_labels.append(row["label"])

    def as_int(v):
        try:
            return int(v)
        except (TypeError, ValueError):
            return None

    if all(as_int(v) is not None for v in raw_labels):
        label_ids = [as_int(v) for v in raw_labels]
        n_classes = max(label_ids) + 1
        for (lineno, _), lid in zip(rows, label_ids):
            if lid < 0:
                raise FormatError(f"unknown label {lid}", line=lineno)
        label_names = [str(c) for c in range(n_classes)]
    else:
        label_names = sorted({str(v) for v in raw_labels})
        index = {name: i for i, name in enumerate(label_names)}
        label_ids = [index[str(v)] for v in raw_labels]

    have_splits = [r.get("split") for _, r in rows]
    if any(have_splits):
        for (lineno, _), s in zip(rows, have_splits):
            if s not in ("train", "dev", "test"):
                raise FormatError(f"unknown split {s!r}", line=lineno)
        splits = list(have_splits)
    else:
        splits = _assign_splits(
            len(rows), np.random.default_rng(0), dev_frac=0.1, test_frac=0.1
        )

    examples = []
    for i, ((lineno, row), lid, split) in enumerate(zip(rows, label_ids, splits)):
        ex_id = str(row.get("id")) if row.get("id") not in (None, "") else f"row-{i:06d}"
        examples.append(Example(id=ex_id, text=str(row["text"]), label=lid, split=split))
    ds = TextDataset(examples=examples, label_names=label_names,
                     provenance={"source": str(path), "format": format})
    ds.validate()
    return ds


def export(dataset: TextDataset, path: str, format: str = "csv") -> None:
    """Write a dataset back out in a form :func:`ingest` accepts."""
    if format not in ("csv", "jsonl"):
        raise InvalidInput(f"unknown format {format!r}")
    if format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "text", "label", "split"])
            writer.writeheader()
            for e in dataset.examples:
                writer.writerow(
                    {"id": e.id, "text": e.text, "label": e.label, "split": e.split}
                )
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for e in dataset.examples:
                fh.write(json.dumps(
                    {"id": e.id, "text": e.text, "label": e.label, "split": e.split}
                ) + "\n")


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    words: list[str]
    vectors: np.ndarray  # (vocab, dim), unit L2 rows
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {w: i for i, w in enumerate(self.words)}

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self.index[word]]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))


def _scatter_mean_step(target: np.ndarray, idx: np.ndarray, grads: np.ndarray, rate: float):
    """SGD step with the per-row mean gradient over the batch.

    Averaging (rather than summing duplicate-row contributions) keeps
    steps bounded for high-frequency words in large batches.
    """
    sums = np.zeros_like(target)
    np.add.at(sums, idx, grads)
    counts = np.bincount(idx, minlength=target.shape[0]).astype(np.float64)
    touched = counts > 0
    target[touched] -= rate * sums[touched] / counts[touched, None]


def train_embeddings(
    dataset: TextDataset,
    dim: int = 64,
    epochs: int = 0,
    seed: int = 0,
    window: int = 3,
    negatives: int = 5,
    lr: float = 0.02,
    subsample: float = 5e-3,
) -> EmbeddingTable:
    """Word embeddings from skip-gram co-occurrence over the train split.

    The core is a spectral factorization: symmetric window counts are
    turned into a positive PMI matrix and decomposed with an exact SVD,
    giving word vectors ``U[:, :dim] * sqrt(S[:dim])``. This is the
    closed-form counterpart of skip-gram with negative sampling and is
    deterministic, so word neighborhoods are stable run to run.

    ``epochs > 0`` additionally runs that many passes of negative-
    sampling SGD refinement from the spectral starting point (frequent
    words downsampled word2vec style with threshold ``subsample``).
    The default leaves refinement off; it costs far more time than the
    factorization and does not move neighborhood quality on corpora of
    this size.

    Returned rows are unit L2. Deterministic for a fixed seed.
    """
    sentences = [t.lower().split() for t in dataset.texts("train")]
    vocab_counts: dict[str, int] = {}
    total_tokens = 0
    for s in sentences:
        for w in s:
            vocab_counts[w] = vocab_counts.get(w, 0) + 1
            total_tokens += 1
    words = sorted(vocab_counts, key=lambda w: (-vocab_counts[w], w))
    if len(words) < 2:
        raise InvalidInput("vocabulary has fewer than 2 words")
    index = {w: i for i, w in enumerate(words)}
    V = len(words)
    if dim < 1:
        raise InvalidInput(f"embedding dim must be positive, got {dim}")
    dim = min(dim, V)

    counts = np.zeros((V, V))
    for s in sentences:
        ids = [index[w] for w in s]
        for i, c in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    counts[c, ids[j]] += 1.0

    total = counts.sum()
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    expected = row @ col
    pmi = np.log((counts * total + 1e-12) / (expected + 1e-12))
    ppmi = np.maximum(pmi, 0.0)

    U, S, _ = np.linalg.svd(ppmi, full_matrices=False)
    W = U[:, :dim] * np.sqrt(S[:dim])
    # Fix each singular vector's sign (largest-magnitude entry positive)
    # so the table is identical across LAPACK builds.
    flip = np.sign(U[np.abs(U[:, :dim]).argmax(axis=0), np.arange(dim)])
    flip[flip == 0] = 1.0
    W *= flip

    if epochs > 0:
        W = _refine_sgns(
            W, sentences, index, vocab_counts, total_tokens,
            epochs=epochs, seed=seed, window=window,
            negatives=negatives, lr=lr, subsample=subsample,
        )

    norms = np.sqrt((W * W).sum(axis=1, keepdims=True))
    norms[norms == 0] = 1.0
    return EmbeddingTable(words=words, vectors=W / norms)


def _refine_sgns(
    W: np.ndarray,
    sentences: list[list[str]],
    index: dict[str, int],
    vocab_counts: dict[str, int],
    total_tokens: int,
    epochs: int,
    seed: int,
    window: int,
    negatives: int,
    lr: float,
    subsample: float,
) -> np.ndarray:
    """Negative-sampling SGD passes starting from spectral vectors."""
    words = list(index)
    V, dim = W.shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE3B]))
    freq = np.array([vocab_counts[w] for w in words], dtype=np.float64) / total_tokens
    keep = np.minimum(1.0, np.sqrt(subsample / freq) + subsample / freq)

    centers, contexts = [], []
    for s in sentences:
        ids = [i for i in (index[w] for w in s) if rng.random() < keep[i]]
        for i, c in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    centers.append(c)
                    contexts.append(ids[j])
    centers = np.asarray(centers, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64)
    n_pairs = centers.size
    if n_pairs == 0:
        return W

    noise = np.array([vocab_counts[w] for w in words], dtype=np.float64) ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    # Rescale to typical SGD magnitudes so sigmoids are not saturated.
    W = W / max(np.sqrt((W * W).sum(axis=1)).mean(), 1e-12)
    C = W.copy()

    batch = 8192
    total_steps = max(1, epochs * math.ceil(n_pairs / batch))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch):
            sel = order[start : start + batch]
            ci, oi = centers[sel], contexts[sel]
            neg = np.searchsorted(noise_cdf, rng.random((sel.size, negatives)))
            rate = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1

            vi = W[ci]  # (B, d)
            vo = C[oi]
            vn = C[neg]  # (B, k, d)
            g_pos = _sigmoid((vi * vo).sum(axis=1)) - 1.0  # (B,)
            g_neg = _sigmoid((vn @ vi[:, :, None]).squeeze(-1))  # (B, k)

            grad_vi = g_pos[:, None] * vo + (g_neg[:, :, None] * vn).sum(axis=1)
            _scatter_mean_step(W, ci, grad_vi, rate)
            _scatter_mean_step(C, oi, g_pos[:, None] * vi, rate)
            _scatter_mean_step(
                C, neg.ravel(), (g_neg[:, :, None] * vi[:, None, :]).reshape(-1, dim), rate
            )
    return W
