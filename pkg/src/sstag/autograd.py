"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Tensors wrap row-major float64 ndarrays. Each differentiable op records an
operation tag, parent references, and a closure computing parent gradients
from the output gradient; ``backward`` walks the graph once in reverse
topological order and accumulates into leaf ``grad`` buffers. Inference
runs under ``no_grad()`` and allocates no graph records. ``record_ops()``
captures the forward op-tag stream regardless of grad mode, which lets
callers assert structural properties of a path (e.g. that an embedding
pass never touched the sparse adjacency op).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .util import ValidationError

_GRAD_ENABLED = True
_TRACES: list[list[str]] = []

# rows with zero norm encountered by cosine_rows; cheap global diagnostic
zero_norm_row_count = 0


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def record_ops(sink: list):
    """Append the tag of every op executed inside the block to ``sink``."""
    _TRACES.append(sink)
    try:
        yield sink
    finally:
        _TRACES.remove(sink)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_grads_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._grads_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._grads_fn is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(tag: str, data: np.ndarray, parents: tuple, grads_fn) -> Tensor:
    """Wrap an op result; records the tag and, when grads are live, the node."""
    for sink in _TRACES:
        sink.append(tag)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.op = tag
        out._parents = parents
        out._grads_fn = grads_fn
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss.

    Leaf gradients accumulate across calls (callers zero them between
    steps); interior buffers are reset per call so repeated backward passes
    over one graph scale linearly, not compoundingly.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or node._grads_fn is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._grads_fn is not None and id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is None:
            continue
        grads = node._grads_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, np.float64)
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    data = a.data**e
    return _make("power", data, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError(
            f"matmul operands need >= 2 dims, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValidationError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def grads(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make("matmul", data, (a, b), grads)


# -- shape plumbing -----------------------------------------------------------


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValidationError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        "concat", data, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis))
    )


def slice_(a, key) -> Tensor:
    """Basic (non-advanced) indexing with gradient scatter-back."""
    a = as_tensor(a)

    def grads(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make("slice", a.data[key], (a,), grads)


def gather_rows(table, index) -> Tensor:
    """Rows of ``table`` selected by an integer array (embedding lookup)."""
    table = as_tensor(table)
    index = np.asarray(index, np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.data.shape[0]):
        raise ValidationError("gather index out of range")

    def grads(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("gather_rows", table.data[index], (table,), grads)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grads(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make("sum", data, (a,), grads)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities -----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make("relu", np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-form gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def grads(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t**2) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make("gelu", data, (a,), grads)


def softmax_last(a) -> Tensor:
    """Softmax over the trailing axis, max-shifted for overflow safety."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grads(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make("softmax", s, (a,), grads)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValidationError("softmax_rows expects a 2-d tensor")
    return softmax_last(a)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean/unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def grads(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("layer_norm", data, (x, gain, bias), grads)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p); identity when idle."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValidationError("training-mode dropout needs an rng")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- losses ----------------------------------------------------------------


def nll_rows(logits, targets) -> Tensor:
    """Per-row negative log softmax probability of the target class."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, np.int64)
    if logits.data.ndim != 2:
        raise ValidationError("nll_rows expects (rows, classes) logits")
    n, c = logits.data.shape
    if targets.shape != (n,):
        raise ValidationError("targets misaligned with logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValidationError("target class out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    data = lse - shifted[np.arange(n), targets]

    def grads(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), targets] -= 1.0
        return (soft * g[:, None],)

    return _make("nll_rows", data, (logits,), grads)


def cross_entropy_from_logits(logits, targets) -> Tensor:
    """Mean NLL over rows (softmax folded in, log-sum-exp stabilized)."""
    return mean_(nll_rows(logits, targets))


def cosine_rows(a, b) -> Tensor:
    """Row-wise cosine similarity; zero-norm rows yield 0 with zero gradient."""
    global zero_norm_row_count
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ValidationError("cosine_rows expects two equal-shape 2-d tensors")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    degenerate = (na == 0) | (nb == 0)
    if degenerate.any():
        zero_norm_row_count += int(degenerate.sum())
    denom = np.where(degenerate, 1.0, na * nb)
    cos = np.where(degenerate, 0.0, (a.data * b.data).sum(axis=1) / denom)

    def grads(g):
        scale = (g * ~degenerate)[:, None]
        safe_na = np.where(na == 0, 1.0, na)
        safe_nb = np.where(nb == 0, 1.0, nb)
        ga = scale * (b.data / denom[:, None] - cos[:, None] * a.data / (safe_na**2)[:, None])
        gb = scale * (a.data / denom[:, None] - cos[:, None] * b.data / (safe_nb**2)[:, None])
        return ga, gb

    return _make("cosine_rows", cos, (a, b), grads)


def mse(a, b) -> Tensor:
    """Mean over rows of the squared euclidean gap per row."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ValidationError("mse expects two equal-shape 2-d tensors")
    diff = sub(a, b)
    return mean_(sum_(mul(diff, diff), axis=1))
