"""Minimal dense-tensor reverse-mode automatic differentiation.

Values are float64 numpy arrays.  Recording is explicit: ops executed inside a
``with Tape() as tape:`` block append their backward rules to that tape in
creation order, and ``tape.backward(loss)`` replays them once in reverse.
Outside a tape, ops run plain numpy with no recording, which keeps inference
rollouts cheap.

Gradients flowing through interior nodes live in a per-pass buffer; only leaf
tensors (inputs created with ``requires_grad=True``) accumulate into ``.grad``,
so repeated backward calls without zeroing add up exactly.

Reduction order is fixed by construction (one numpy call per op), so repeated
runs over identical inputs produce bit-identical values and gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_LEAKY_SLOPE = 0.01
_MASK_FILL = -1e9

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus a gradient buffer for leaves.

    ``requires_grad`` marks leaves (parameters/inputs).  Interior nodes inherit
    the flag from their parents so backward can skip dead branches, but their
    gradients stay in the tape's per-pass buffer and are never stored here.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# A backward rule maps the output gradient to (parent, parent gradient) pairs.
BackwardRule = Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]]


class Tape:
    """Ordered record of ops for one backward pass.

    Topological order is creation order, so ``backward`` visits each node
    exactly once by walking the record in reverse.  A tape is single-threaded;
    concurrent forwards need independent tapes.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, BackwardRule]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward: BackwardRule) -> None:
        self._nodes.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        # id() keys are stable here because the values hold the tensors alive.
        flows: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
        produced = {id(out) for out, _ in self._nodes}
        for out, backward in reversed(self._nodes):
            entry = flows.pop(id(out), None)
            if entry is None:
                continue  # not on a path to the loss
            g = entry[1]
            for parent, pg in backward(g):
                if not parent.requires_grad:
                    continue
                held = flows.get(id(parent))
                if held is None:
                    flows[id(parent)] = [parent, np.array(pg, dtype=np.float64)]
                else:
                    held[1] += pg
        for tensor, g in flows.values():
            if id(tensor) in produced or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], backward: BackwardRule) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape)))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return _record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data)

    def backward(g):
        return ((a, -g),)

    return _record(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs (.., m, k) @ (.., k, n), got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.data.shape)),
                (b, _unbroadcast(gb, b.data.shape)))

    return _record(out, (a, b), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))

    def backward(g):
        return ((a, g * mask),)

    return _record(out, (a,), backward)


def leaky_relu(a, slope: float = _LEAKY_SLOPE) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, slope * a.data))

    def backward(g):
        return ((a, g * np.where(mask, 1.0, slope)),)

    return _record(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((a, y * (g - inner)),)

    return _record(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    out = Tensor(y)

    def backward(g):
        return ((a, g - np.exp(y) * g.sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must be ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        gx = g * gain.data
        term1 = gx.mean(axis=-1, keepdims=True)
        term2 = (gx * xhat).mean(axis=-1, keepdims=True)
        return ((x, (gx - term1 - xhat * term2) * inv),
                (gain, (g * xhat).reshape(-1, d).sum(axis=0)),
                (bias, g.reshape(-1, d).sum(axis=0)))

    return _record(out, (x, gain, bias), backward)


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving entries scaled by 1/(1-p).

    Callers skip this op entirely at inference; there is no eval branch here.
    """
    x = _wrap(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = rng.random(x.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = Tensor(x.data * keep * scale)

    def backward(g):
        return ((x, g * keep * scale),)

    return _record(out, (x,), backward)


def embedding_lookup(table, indices) -> Tensor:
    """Gather rows of ``table`` by an integer index array of any shape."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"embedding indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(f"embedding index out of range for table with {table.data.shape[0]} rows")
    out = Tensor(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return ((table, gt),)

    return _record(out, (table,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pairs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pairs.append((p, g[tuple(sl)]))
        return pairs

    return _record(out, tuple(parts), backward)


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def backward(g):
        slices = np.moveaxis(g, axis, 0)
        return [(p, gp) for p, gp in zip(parts, slices)]

    return _record(out, tuple(parts), backward)


def masked_fill(x, mask, value: float = _MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no grad there)."""
    x = _wrap(x)
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, value, x.data))

    def backward(g):
        return ((x, _unbroadcast(np.where(mask, 0.0, g), x.data.shape)),)

    return _record(out, (x,), backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    x = _wrap(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.data.shape)),)

    return _record(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    if axis is None:
        count = x.data.size
    elif isinstance(axis, int):
        count = x.data.shape[axis]
    else:
        count = int(np.prod([x.data.shape[a] for a in axis]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return ((x, g.reshape(x.data.shape)),)

    return _record(out, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return ((x, g.transpose(inv)),)

    return _record(out, (x,), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Select slices along ``axis`` by integer indices (scatter-add backward)."""
    x = _wrap(x)
    idx = np.asarray(indices)
    out = Tensor(np.take(x.data, idx, axis=axis))

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return ((x, gx),)

    return _record(out, (x,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Per-element cross entropy from raw logits over the last axis.

    Returns losses of shape ``logits.shape[:-1]``; callers mask and reduce.
    """
    logits = _wrap(logits)
    t = np.asarray(targets)
    if t.shape != logits.data.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.data.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"targets must be integers, got dtype {t.dtype}")
    n_classes = logits.data.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(f"target out of range for {n_classes} classes")
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    out = Tensor(-picked)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return ((logits, g[..., None] * (p - onehot)),)

    return _record(out, (logits,), backward)
