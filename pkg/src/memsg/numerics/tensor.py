"""Dense float64 tensors with reverse-mode differentiation.

Every op is a plain function that returns a new :class:`Tensor` and, when
gradient recording is enabled, a closure that pushes the output gradient
back into its inputs. Shapes must match exactly: the only broadcasting ops
are the explicit ones (:func:`add_bias`, :func:`layer_norm` gain/bias).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires grad.

    Gradients accumulate, so call :meth:`Tensor.zero_grad` (or
    ``ParamStore.zero_grad``) between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    # intermediate grads are local to this call; leaf grads accumulate
    interior = {id(n) for n in order if n._backward is not None}
    for n in order:
        if id(n) in interior:
            n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in order:
        if id(n) in interior:
            n.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: _accum(x, g * c))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` matching the trailing axis of ``x``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")

    def bw(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU (smooth everywhere, which keeps finite differences honest)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        _accum(x, g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * d_inner))

    return _make(out, (x,), bw)


def mask_fill(x: Tensor, keep: np.ndarray, value: float = 0.0) -> Tensor:
    """Replace entries where ``keep`` is False by a constant."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise ShapeError(f"mask_fill: mask {keep.shape} vs tensor {x.shape}")
    return _make(np.where(keep, x.data, value), (x,), lambda g: _accum(x, g * keep))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix ``[k, m]`` shared across the leading axes
    of ``a``, or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k, m = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(old)))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat axis={axis}: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, bw)


def getitem(x: Tensor, key) -> Tensor:
    """Basic/advanced indexing; repeated indices accumulate in backward."""

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accum(x, full)

    return _make(np.array(x.data[key]), (x,), bw)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    """Rows of ``table`` gathered by an integer array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(table.data[idx], (table,), bw)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: _accum(x, np.full_like(x.data, float(g))))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        return _make(np.array(x.data.mean()), (x,), lambda g: _accum(x, np.full_like(x.data, float(g) / n)))
    ax = axis % x.ndim
    n = x.shape[ax]

    def bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, ax), x.shape) / n)

    return _make(x.data.mean(axis=ax), (x,), bw)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x[..., N, d]`` using rows where ``mask[..., N]``.

    A slice with no valid rows yields the zero vector.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean: mask {mask.shape} vs tensor {x.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    w = mask / np.maximum(counts, 1.0)
    out = np.einsum("...n,...nd->...d", w, x.data)
    return _make(out, (x,), lambda g: _accum(x, w[..., :, None] * g[..., None, :]))


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; masked-out entries get probability 0.

    A slice with every entry masked returns all zeros.
    """
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs tensor {v.shape}")
        v = np.where(mask, v, -np.inf)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------- losses


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer targets.

    ``logits`` is ``[C]`` with a scalar target, or ``[n, C]`` with ``n`` targets.
    """
    single = logits.ndim == 1
    lg = logits.data[None, :] if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if lg.ndim != 2 or tgt.shape != (lg.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    n = lg.shape[0]
    if n == 0:
        return _make(np.array(0.0), (logits,), lambda g: None)
    logp = log_softmax_np(lg)
    rows = np.arange(n)
    loss = -logp[rows, tgt].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        p *= float(g) / n
        _accum(logits, p[0] if single else p)

    return _make(np.array(loss), (logits,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


def stack_rows(xs: Iterable[Tensor]) -> Tensor:
    """Stack equal-shape vectors into a matrix (rows)."""
    xs = list(xs)
    return concat([reshape(t, (1,) + t.shape) for t in xs], axis=0)
