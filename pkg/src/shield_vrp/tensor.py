"""Small reverse-mode autodiff over float64 NumPy arrays.

Just enough for the policy network: broadcasting arithmetic, batched matmul,
fused linear / softmax / layer norm / attention, gathers and the MoD merge.
Every op records a closure on the tape when any input requires a gradient;
``Tensor.backward`` walks the tape in reverse topological order.

Masked logits are represented as -inf (only ``masked_fill`` may produce
them); any other op yielding NaN or +-inf raises ``NonFiniteError``.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .errors import DegenerateDistributionError, DimensionError, NonFiniteError

LN_EPS = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad needs a scalar tensor")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
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
        self.grad = np.array(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior grads are not needed after propagation
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check(out, allow_neginf=False):
    if allow_neginf:
        bad = np.isnan(out).any() or np.isposinf(out).any()
    else:
        bad = not np.isfinite(out).all()
    if bad:
        raise NonFiniteError("non-finite value produced")
    return out


def _make(out, parents, backward, allow_neginf=False) -> Tensor:
    _check(out, allow_neginf)
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


# ------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        _accum(x, g * (x.data > 0))

    return _make(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - out * out))

    return _make(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g / x.data)

    with np.errstate(divide="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), bw)


# ---------------------------------------------------------------- shaping

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    def bw(g):
        _accum(x, np.swapaxes(g, a1, a2))

    return _make(np.swapaxes(x.data, a1, a2), (x,), bw)


def concat(xs, axis=-1) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, cuts, axis=axis)):
            _accum(x, piece)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def index(x: Tensor, key) -> Tensor:
    """Basic or fancy indexing; the backward scatters with ``np.add.at``."""
    key = _freeze_key(key)

    def bw(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accum(x, full)

    return _make(x.data[key], (x,), bw)


def _freeze_key(key):
    # callers may mutate index arrays in place after the forward pass
    if isinstance(key, tuple):
        return tuple(np.array(k) if isinstance(k, np.ndarray) else k for k in key)
    return np.array(key) if isinstance(key, np.ndarray) else key


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x: (B, N, ...), idx: (B, K) int -> (B, K, ...)."""
    bidx = np.arange(x.shape[0])[:, None]
    return index(x, (np.broadcast_to(bidx, idx.shape), idx))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.array(np.broadcast_to(mask, x.shape))

    def bw(g):
        _accum(x, np.where(mask, 0.0, g))

    return _make(np.where(mask, value, x.data), (x,), bw, allow_neginf=True)


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """x (..., d_in) @ w (d_in, d_out) + b (d_out)."""
    x, w = _lift(x), _lift(w)
    b = None if b is None else _lift(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise DimensionError(
            f"linear shapes x{x.shape} w{w.shape} b{None if b is None else b.shape}"
        )
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)
    d_in, d_out = w.shape

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        g2 = g.reshape(-1, d_out)
        if w.requires_grad:
            _accum(w, x.data.reshape(-1, d_in).T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make(out, parents, bw)


# ------------------------------------------------------ normalizations

def softmax(x, axis=-1) -> Tensor:
    """Stable softmax; -inf entries get probability exactly 0."""
    x = _lift(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateDistributionError("softmax over a fully masked row")
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), bw)


def layer_norm(x, gain, bias, eps=LN_EPS) -> Tensor:
    """Per-row standardization over the last axis followed by an affine map."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if d < 2 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm shapes x{x.shape} gain{gain.shape} bias{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))

    return _make(out, (x, gain, bias), bw)


# ----------------------------------------------------------------- attention

def multi_head_attention(q, k, v, heads: int, mask=None, wq=None, wk=None, wv=None,
                         wo=None) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    q: (..., a, d); k, v: (..., n, d); mask: boolean (..., a, n), True means
    the key is forbidden for that query.  Projections default to identity.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if wq is not None:
        q = linear(q, wq)
    if wk is not None:
        k = linear(k, wk)
    if wv is not None:
        v = linear(v, wv)
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x):
        return swapaxes(reshape(x, x.shape[:-1] + (heads, dh)), -2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = masked_fill(scores, np.expand_dims(np.asarray(mask, dtype=bool), -3), -np.inf)
    attn = softmax(scores, axis=-1)
    out = swapaxes(matmul(attn, vh), -2, -3)
    out = reshape(out, out.shape[:-2] + (d,))
    if wo is not None:
        out = linear(out, wo)
    return out


# -------------------------------------------------------------- MoD merge

def scatter_add_rows(base: Tensor, upd: Tensor, sel: np.ndarray) -> Tensor:
    """Copy of base (B, A, d) with upd (B, K, d) added onto rows sel (B, K).

    Rows not in ``sel`` are copied untouched, so they are bit-identical to
    the input.
    """
    sel = np.array(sel)
    bidx = np.broadcast_to(np.arange(base.shape[0])[:, None], sel.shape)
    out = base.data.copy()
    out[bidx, sel] += upd.data

    def bw(g):
        _accum(base, g)
        _accum(upd, g[bidx, sel])

    return _make(out, (base, upd), bw)
