"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: matmul, broadcast add/sub/mul,
reshape/transpose/slice, sum/mean, gelu, layer_norm, softmax over the
last axis, embedding lookup, L2 row normalization, and a straight-through
quantize-dequantize. That is everything the transformer classifier and
its trainers need; there is no general graph optimizer.

Gradients are recorded on an explicit :class:`GradTape`. Operations
executed while a tape is active and touching a watched tensor are
recorded in creation order; replaying the record backward yields one
gradient per watched parameter (zeros for parameters the loss never
touched). With no active tape, operations run as plain numpy math,
which is the fast inference path.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput

_ids = itertools.count()

# Active-tape stack. Tapes are single-stream: one trainer per tape.
_TAPE_STACK: list["GradTape"] = []


def _active_tape() -> "GradTape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 ndarray plus autodiff bookkeeping.

    ``requires_grad`` marks parameters; it has no effect until the
    tensor is watched by a tape. Tensors are treated as immutable values
    by all operations; trainers update parameter ``data`` in place
    between tape runs, never inside one.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    def __deepcopy__(self, memo):
        # A copy is a distinct parameter: it must get its own node id,
        # or watching the copy would silently watch the original too.
        clone = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        memo[id(self)] = clone
        return clone

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # Operator sugar; everything routes through the primitives below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class GradTape:
    """Ordered record of primitive operations over watched tensors.

    Use as a context manager around a forward pass::

        with GradTape() as tape:
            tape.watch(params)
            loss = ...
        grads = tape.gradients(loss)
    """

    def __init__(self):
        self._nodes: list[tuple[int, list[int], Callable]] = []
        self._watched: list[Tensor] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def watch(self, tensors: Tensor | Sequence[Tensor]) -> None:
        if isinstance(tensors, Tensor):
            tensors = [tensors]
        for t in tensors:
            if t.node_id not in self._tracked:
                self._watched.append(t)
                self._tracked.add(t.node_id)

    def _record(self, out: Tensor, inputs: list[Tensor], backward: Callable) -> None:
        self._tracked.add(out.node_id)
        self._nodes.append((out.node_id, [t.node_id for t in inputs], backward))

    def gradients(self, loss: Tensor) -> list[np.ndarray]:
        """Replay the tape backward from ``loss``.

        Returns one gradient array per watched tensor, in watch order;
        watched tensors the loss does not depend on get exact zeros.
        """
        if loss.node_id not in self._tracked:
            raise InvalidInput("loss was not produced on this tape")
        if loss.size != 1:
            raise InvalidInput(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out_id, input_ids, backward in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for node_id, gin in zip(input_ids, backward(g)):
                if gin is None or node_id not in self._tracked:
                    continue
                if node_id in grads:
                    grads[node_id] = grads[node_id] + gin
                else:
                    grads[node_id] = gin
        return [
            grads.get(t.node_id, np.zeros_like(t.data)) for t in self._watched
        ]


def backward(tape: GradTape, loss: Tensor) -> list[np.ndarray]:
    """Gradient of ``loss`` w.r.t. every tensor watched on ``tape``."""
    return tape.gradients(loss)


def ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# primitives


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _apply(
    inputs: list[Tensor], out_data: np.ndarray, backward_fn: Callable
) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.node_id in tape._tracked for t in inputs):
        tape._record(out, inputs, backward_fn)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _apply([a, b], a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape))

    return _apply([a, b], a.data - b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _apply([a, b], a.data * b.data, bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; operands are 2-D, stacked-by-2-D, or share ndim."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or (
        b.data.ndim != 2 and a.data.ndim != b.data.ndim
    ):
        raise InvalidInput(
            f"unsupported matmul ndims {a.data.ndim} and {b.data.ndim}"
        )

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _apply([a, b], a.data @ b.data, bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _apply([a], a.data.reshape(shape), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _apply([a], a.data.transpose(axes), bwd)


def slice_(a: Tensor, key) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _apply([a], a.data[key], bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _apply([a], a.data.sum(axis=axis, keepdims=keepdims), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _apply([a], a.data.mean(axis=axis, keepdims=keepdims), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """GELU activation, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _apply([a], out, bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        gx = inv * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _apply([a, gain, bias], out, bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply([a], y, bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradient scatters back into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _apply([table], table.data[ids], bwd)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along the last axis."""
    a = _as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    y = x / n

    def bwd(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _apply([a], y, bwd)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (not banker's)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_dequantize(a: Tensor, scale: np.ndarray, max_level: int = 127) -> Tensor:
    """Fake int8 quantization with a straight-through gradient.

    ``scale`` is a plain array broadcastable to ``a``; the backward pass
    is the identity (no clipping of out-of-range gradients).
    """
    a = _as_tensor(a)
    scale = np.asarray(scale, dtype=np.float64)
    q = np.clip(round_half_away(a.data / scale), -max_level, max_level)
    out = q * scale

    def bwd(g):
        return (g,)

    return _apply([a], out, bwd)
