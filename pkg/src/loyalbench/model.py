"""Tiny transformer text classifier, tokenizer, and checkpoint IO.

The same architecture serves as teacher and student: token + position
embeddings, a stack of post-LN transformer layers with per-head gate
masks, and a CLS-style classifier head reading the first position.

Linear-layer weights are either float :class:`~loyalbench.tensor.Tensor`
objects or int8 ``QuantizedLinear`` records (duck-typed via
``as_float``); the forward pass handles both, plus a fake-quantized
training mode that mirrors the int8 inference path with straight-through
gradients.
"""

from __future__ import annotations

import copy
import json
import struct
from collections import Counter
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidInput
from .tensor import (
    Tensor,
    add,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    quantize_dequantize,
    reshape,
    softmax_lastdim,
    transpose,
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
CLS_TOKEN = "<cls>"

_MAGIC = b"LBCP"
_VERSION = 1


class Tokenizer:
    """Whitespace + lowercasing tokenizer over a fixed vocabulary."""

    def __init__(self, vocab: dict[str, int], unk_id: int, max_len: int):
        self.vocab = dict(vocab)
        self.unk_id = int(unk_id)
        self.max_len = int(max_len)
        self.pad_id = self.vocab[PAD_TOKEN]
        self.cls_id = self.vocab[CLS_TOKEN]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def build(cls, texts: Sequence[str], max_vocab: int = 1000, max_len: int = 64):
        """Frequency-built vocabulary; ties broken lexicographically."""
        counts = Counter()
        for text in texts:
            counts.update(text.lower().split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        vocab = {PAD_TOKEN: 0, UNK_TOKEN: 1, CLS_TOKEN: 2}
        for token, _ in ranked[: max_vocab - len(vocab)]:
            vocab[token] = len(vocab)
        return cls(vocab, unk_id=vocab[UNK_TOKEN], max_len=max_len)

    def words(self) -> list[str]:
        """In-vocabulary word types, excluding the reserved specials."""
        special = {PAD_TOKEN, UNK_TOKEN, CLS_TOKEN}
        return [w for w in self.vocab if w not in special]

    def encode(self, text: str) -> list[int]:
        ids = [self.cls_id]
        for token in text.lower().split():
            ids.append(self.vocab.get(token, self.unk_id))
        return ids[: self.max_len]

    def encode_batch(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Pad a batch of texts to its longest sequence.

        Returns int64 ids (batch, seq) and a float mask (batch, seq)
        that is 1 on real positions, 0 on padding. Model outputs do not
        depend on the padded length.
        """
        encoded = [self.encode(t) for t in texts]
        width = max(len(e) for e in encoded)
        ids = np.full((len(encoded), width), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(encoded), width), dtype=np.float64)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = e
            mask[i, : len(e)] = 1.0
        return ids, mask


class QuantizedLinear:
    """Symmetric per-tensor int8 weight record.

    Stored integers lie in [-127, 127]; ``scale`` maps them back to
    floats with elementwise error at most scale/2. Bias terms stay
    float and live on the owning layer.
    """

    __slots__ = ("int_weight", "scale", "orig_shape", "quantize_activations")

    def __init__(
        self,
        int_weight: np.ndarray,
        scale: float,
        orig_shape: tuple[int, ...],
        quantize_activations: bool = True,
    ):
        self.int_weight = np.asarray(int_weight, dtype=np.int8)
        self.scale = float(scale)
        self.orig_shape = tuple(orig_shape)
        self.quantize_activations = bool(quantize_activations)

    def as_float(self) -> np.ndarray:
        return self.int_weight.astype(np.float64) * self.scale


def _is_quantized(w) -> bool:
    return isinstance(w, QuantizedLinear)


class TransformerLayer:
    """Multi-head self-attention + GELU feed-forward, post-LN residuals.

    ``gates`` holds one 0/1 entry per attention head; a zero gate makes
    that head's contribution exactly nothing.
    """

    WEIGHT_SLOTS = ("wq", "wk", "wv", "wo", "w1", "w2")

    def __init__(self, hidden: int, num_heads: int, ffn: int, rng: np.random.Generator):
        if hidden % num_heads != 0:
            raise InvalidInput(f"hidden {hidden} not divisible by {num_heads} heads")
        self.hidden = hidden
        self.num_heads = num_heads
        self.head_dim = hidden // num_heads
        self.ffn = ffn

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.wq, self.wk, self.wv, self.wo = (w((hidden, hidden)) for _ in range(4))
        self.bq, self.bk, self.bv, self.bo = (zeros(hidden) for _ in range(4))
        self.w1 = w((hidden, ffn))
        self.b1 = zeros(ffn)
        self.w2 = w((ffn, hidden))
        self.b2 = zeros(hidden)
        self.ln1_g, self.ln2_g = Tensor(np.ones(hidden), requires_grad=True), Tensor(
            np.ones(hidden), requires_grad=True
        )
        self.ln1_b, self.ln2_b = zeros(hidden), zeros(hidden)
        self.gates = np.ones(num_heads, dtype=np.float64)

    def params(self) -> list[Tensor]:
        out = []
        for slot in self.WEIGHT_SLOTS:
            w = getattr(self, slot)
            if isinstance(w, Tensor):
                out.append(w)
        out.extend(
            [self.bq, self.bk, self.bv, self.bo, self.b1, self.b2,
             self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]
        )
        return out


class ClassifierModel:
    """Layered transformer classifier with serializable parameters."""

    def __init__(
        self,
        vocab_size: int,
        num_classes: int,
        hidden: int = 64,
        num_heads: int = 4,
        num_layers: int = 4,
        ffn: int = 256,
        max_len: int = 64,
        seed: int = 0,
        provenance: str = "init",
        tokenizer: Tokenizer | None = None,
    ):
        if num_layers < 1:
            raise InvalidInput("num_layers must be >= 1")
        if hidden % num_heads != 0:
            raise InvalidInput(f"hidden {hidden} not divisible by {num_heads} heads")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.hidden = hidden
        self.num_heads = num_heads
        self.ffn = ffn
        self.max_len = max_len
        self.provenance = provenance
        self.tokenizer = tokenizer
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, (vocab_size, hidden)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (max_len, hidden)), requires_grad=True)
        self.layers = [TransformerLayer(hidden, num_heads, ffn, rng) for _ in range(num_layers)]
        self.head_w: Tensor | QuantizedLinear = Tensor(
            rng.normal(0.0, 0.02, (hidden, num_classes)), requires_grad=True
        )
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def params(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            out.extend(layer.params())
        if isinstance(self.head_w, Tensor):
            out.append(self.head_w)
        out.append(self.head_b)
        return out

    def linear_slots(self):
        """Yield (owner, attribute) for every quantizable weight matrix."""
        for layer in self.layers:
            for slot in TransformerLayer.WEIGHT_SLOTS:
                yield layer, slot
        yield self, "head_w"

    def is_quantized(self) -> bool:
        return any(_is_quantized(getattr(o, s)) for o, s in self.linear_slots())

    def clone(self, provenance: str | None = None) -> "ClassifierModel":
        m = copy.deepcopy(self)
        if provenance is not None:
            m.provenance = provenance
        return m

    # -- forward ----------------------------------------------------------

    def forward_batch(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        fake_quant: bool = False,
        gate_overrides: list[Tensor] | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Logits (batch, classes) plus per-layer hidden states.

        ``fake_quant`` runs the int8 simulation on float weights with
        straight-through gradients. ``gate_overrides`` supplies taped
        per-layer tensors multiplied onto the stored head gates (used
        for importance scoring).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0 or ids.shape[1] == 0:
            raise InvalidInput("empty input")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise InvalidInput(
                f"token id out of range [0, {self.vocab_size}): {int(ids.max())}"
            )
        if ids.shape[1] > self.max_len:
            raise InvalidInput(f"sequence length {ids.shape[1]} exceeds {self.max_len}")
        batch, seq = ids.shape
        mask = np.asarray(mask, dtype=np.float64)
        mask3 = mask[:, :, None]

        x = add(embedding(self.tok_emb, ids), embedding(self.pos_emb, np.arange(seq)))
        attn_bias = ((mask - 1.0) * 1e9)[:, None, None, :]

        hidden_states: list[Tensor] = []
        for li, layer in enumerate(self.layers):
            gate = Tensor(layer.gates)
            if gate_overrides is not None:
                # Overrides multiply the stored gates, so probing at
                # override=1 leaves pruned heads dead and gives them an
                # exactly zero override-gradient.
                gate = mul(gate_overrides[li], gate)
            x = self._layer_forward(layer, x, attn_bias, mask3, gate, fake_quant)
            hidden_states.append(x)

        cls = x[:, 0, :]
        logits = self._linear(cls, self.head_w, self.head_b, None, fake_quant)
        return logits, hidden_states

    def _linear(self, x: Tensor, w, b: Tensor, mask3, fake_quant: bool) -> Tensor:
        quantized = _is_quantized(w)
        act_quant = fake_quant or (quantized and w.quantize_activations)
        if act_quant:
            x = quantize_dequantize(x, _act_scale(x.data, mask3))
        if quantized:
            wt: Tensor = Tensor(w.as_float())
        elif fake_quant:
            wt = quantize_dequantize(w, weight_scale(w.data))
        else:
            wt = w
        y = add(matmul(x, wt), b)
        if act_quant:
            y = quantize_dequantize(y, _act_scale(y.data, mask3))
        return y

    def _layer_forward(self, layer, x, attn_bias, mask3, gate, fake_quant) -> Tensor:
        batch, seq, hidden = x.shape
        nh, hd = layer.num_heads, layer.head_dim

        def heads(t):
            return transpose(reshape(t, (batch, seq, nh, hd)), (0, 2, 1, 3))

        q = heads(self._linear(x, layer.wq, layer.bq, mask3, fake_quant))
        k = heads(self._linear(x, layer.wk, layer.bk, mask3, fake_quant))
        v = heads(self._linear(x, layer.wv, layer.bv, mask3, fake_quant))

        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = softmax_lastdim(add(scores, attn_bias))
        ctx = mul(matmul(attn, v), reshape(gate, (1, nh, 1, 1)))
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, seq, hidden))
        attn_out = self._linear(ctx, layer.wo, layer.bo, mask3, fake_quant)

        x = layer_norm(add(x, attn_out), layer.ln1_g, layer.ln1_b)
        h = self._linear(x, layer.w1, layer.b1, mask3, fake_quant)
        h = self._linear(gelu(h), layer.w2, layer.b2, mask3, fake_quant)
        return layer_norm(add(x, h), layer.ln2_g, layer.ln2_b)


def _act_scale(x: np.ndarray, mask3: np.ndarray | None) -> float:
    """Per-batch symmetric activation scale, ignoring padded rows.

    The scale is computed over the whole tensor per forward call, the way
    dynamic int8 inference engines do it. Outputs therefore depend on
    what else sits in the batch: near-identical inputs sharing a batch
    can snap to identical grid points. Batching is deterministic
    everywhere in this package, so end-to-end runs stay reproducible.
    """
    xm = x if mask3 is None else x * mask3
    m = float(np.abs(xm).max())
    return m / 127.0 if m > 0 else 1.0


def weight_scale(w: np.ndarray) -> float:
    """Symmetric per-tensor weight scale max|w|/127; 1.0 for all-zero."""
    m = float(np.abs(w).max())
    return m / 127.0 if m > 0 else 1.0


def forward(model: ClassifierModel, token_ids: Sequence[int]):
    """Single-sequence forward: 1-D logits plus per-layer hidden states."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidInput("token_ids must be a non-empty 1-D sequence")
    logits, hiddens = model.forward_batch(ids[None, :], np.ones((1, ids.size)))
    return logits.data[0], [h.data[0] for h in hiddens]


def predict_probs(model: ClassifierModel, texts: Sequence[str]) -> np.ndarray:
    """Class probabilities for raw texts via the model's own tokenizer."""
    if model.tokenizer is None:
        raise InvalidInput("model has no tokenizer attached")
    ids, mask = model.tokenizer.encode_batch(texts)
    logits, _ = model.forward_batch(ids, mask)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def truncate(model: ClassifierModel, keep_layers: int) -> ClassifierModel:
    """Keep the bottom ``keep_layers`` layers; embeddings and head copy over."""
    keep_layers = int(keep_layers)
    if keep_layers < 1:
        raise InvalidInput("keep_layers must be >= 1")
    if keep_layers > model.num_layers:
        raise InvalidInput(
            f"keep_layers {keep_layers} exceeds model depth {model.num_layers}"
        )
    out = model.clone(
        provenance=f"truncate({model.provenance}, keep={keep_layers})"
    )
    out.layers = out.layers[:keep_layers]
    return out


# ---------------------------------------------------------------------------
# checkpoint IO: magic + version + JSON header + little-endian payload


def _state_arrays(model: ClassifierModel):
    """Ordered (name, array) pairs covering every parameter and gate."""
    arrays: list[tuple[str, np.ndarray]] = [
        ("tok_emb", model.tok_emb.data),
        ("pos_emb", model.pos_emb.data),
    ]
    quantized: list[dict] = []

    def emit(prefix: str, w):
        if _is_quantized(w):
            arrays.append((f"{prefix}.int8", w.int_weight))
            quantized.append(
                {
                    "slot": prefix,
                    "scale": w.scale,
                    "orig_shape": list(w.orig_shape),
                    "quantize_activations": w.quantize_activations,
                }
            )
        else:
            arrays.append((prefix, w.data))

    for li, layer in enumerate(model.layers):
        p = f"layers.{li}"
        for slot in TransformerLayer.WEIGHT_SLOTS:
            emit(f"{p}.{slot}", getattr(layer, slot))
        for name in ("bq", "bk", "bv", "bo", "b1", "b2",
                     "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            arrays.append((f"{p}.{name}", getattr(layer, name).data))
        arrays.append((f"{p}.gates", layer.gates))
    emit("head_w", model.head_w)
    arrays.append(("head_b", model.head_b.data))
    return arrays, quantized


def save(model: ClassifierModel, path: str) -> None:
    arrays, quantized = _state_arrays(model)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        dtype = "<i1" if arr.dtype == np.int8 else "<f8"
        blob = np.ascontiguousarray(arr.astype(dtype, copy=False)).tobytes()
        manifest.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "meta": {
            "vocab_size": model.vocab_size,
            "num_classes": model.num_classes,
            "hidden": model.hidden,
            "num_heads": model.num_heads,
            "num_layers": model.num_layers,
            "ffn": model.ffn,
            "max_len": model.max_len,
            "provenance": model.provenance,
        },
        "quantized": quantized,
        "tokenizer": None
        if model.tokenizer is None
        else {
            "vocab": model.tokenizer.vocab,
            "unk_id": model.tokenizer.unk_id,
            "max_len": model.tokenizer.max_len,
        },
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load(path: str) -> ClassifierModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise FormatError("bad magic bytes, not a checkpoint", offset=0)
    if len(raw) < 16:
        raise FormatError("truncated header", offset=len(raw))
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (header_len,) = struct.unpack("<Q", raw[8:16])
    payload_start = 16 + header_len
    if len(raw) < payload_start:
        raise FormatError("truncated header", offset=len(raw))
    try:
        header = json.loads(raw[16:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=16) from exc

    meta = header["meta"]
    tok = None
    if header.get("tokenizer"):
        t = header["tokenizer"]
        tok = Tokenizer(t["vocab"], unk_id=t["unk_id"], max_len=t["max_len"])
    model = ClassifierModel(
        vocab_size=meta["vocab_size"],
        num_classes=meta["num_classes"],
        hidden=meta["hidden"],
        num_heads=meta["num_heads"],
        num_layers=meta["num_layers"],
        ffn=meta["ffn"],
        max_len=meta["max_len"],
        provenance=meta["provenance"],
        tokenizer=tok,
    )

    loaded: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = payload_start + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise FormatError(
                f"payload for {entry['name']} runs past end of file", offset=len(raw)
            )
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(entry["shape"])
        loaded[entry["name"]] = arr.copy()

    def take(name: str) -> np.ndarray:
        if name not in loaded:
            raise FormatError(f"missing array {name}", offset=payload_start)
        return loaded[name]

    model.tok_emb = Tensor(take("tok_emb"), requires_grad=True)
    model.pos_emb = Tensor(take("pos_emb"), requires_grad=True)
    quant_by_slot = {q["slot"]: q for q in header.get("quantized", [])}

    def load_weight(prefix: str):
        if prefix in quant_by_slot:
            q = quant_by_slot[prefix]
            return QuantizedLinear(
                take(f"{prefix}.int8"),
                q["scale"],
                tuple(q["orig_shape"]),
                q["quantize_activations"],
            )
        return Tensor(take(prefix), requires_grad=True)

    for li, layer in enumerate(model.layers):
        p = f"layers.{li}"
        for slot in TransformerLayer.WEIGHT_SLOTS:
            setattr(layer, slot, load_weight(f"{p}.{slot}"))
        for name in ("bq", "bk", "bv", "bo", "b1", "b2",
                     "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            setattr(layer, name, Tensor(take(f"{p}.{name}"), requires_grad=True))
        layer.gates = np.array(take(f"{p}.gates"), dtype=np.float64)
    model.head_w = load_weight("head_w")
    model.head_b = Tensor(take("head_b"), requires_grad=True)
    return model
