"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Each operation that touches a tensor requiring gradients records a node with
a monotonically increasing id. ``backward`` walks the nodes reachable from
the loss in decreasing id order, which is exactly reverse recording order, so
every node is visited once and after all of its consumers.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from ._kernels import K
from .errors import InputError

_ids = itertools.count(1)
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids) if requires_grad else None

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return self._id

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise InputError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise InputError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._id = next(_ids)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), backward)


def relu(a):
    keep = a.data > 0
    return _record(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def masked_fill(a, keep, value):
    """Replace entries where ``keep`` is False by a constant; no gradient flows there."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    out = np.where(keep, a.data, value)
    return _record(out, (a,), lambda g: (np.where(keep, g, 0.0),))


def dropout(a, rate, rng):
    if rate <= 0.0:
        return a
    scale = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, scale)


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes, numpy broadcasting over the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), backward)


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x`` as one flattened GEMM."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise InputError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = w.data
    out = x2 @ wd.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(lead + (wd.shape[1],))
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out.reshape(lead + (wd.shape[0],)), parents, backward)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]

    def backward(g):
        gw = np.zeros((rows, g.shape[-1]))
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gw,)

    return _record(weight.data[ids], (weight,), backward)


# ---------------------------------------------------------------------------
# fused normalisers
# ---------------------------------------------------------------------------


def softmax_rows(t, mask=None):
    """Softmax over the last axis.

    ``mask`` is boolean, True where an entry may receive weight. Masked
    entries come out exactly 0. Entries already equal to ``-inf`` are treated
    as masked, which is how attention applies its causal/padding masks.
    """
    t = as_tensor(t)
    x = t.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    if x.size and np.isneginf(x).all(axis=-1).any():
        raise InputError("softmax_rows: a row has no unmasked entry")
    shape = x.shape
    x2 = np.ascontiguousarray(x.reshape(-1, shape[-1]))
    p = K.softmax_fwd(x2)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(p.shape))
        return (K.softmax_bwd(p, g2).reshape(shape),)

    return _record(p.reshape(shape), (t,), backward)


def layer_norm(t, gain, bias, eps=1e-5):
    d = t.shape[-1]
    if d < 2:
        raise InputError(f"layer_norm needs a last dimension of at least 2, got {t.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise InputError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match d={d}")
    shape = t.shape
    x2 = np.ascontiguousarray(t.data.reshape(-1, d))
    y, xhat, rstd = K.layernorm_fwd(x2, gain.data, bias.data, eps)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dg, db = K.layernorm_bwd(g2, xhat, rstd, gain.data)
        return dx.reshape(shape), dg, db

    return _record(y.reshape(shape), (t, gain, bias), backward)


def smoothed_cross_entropy(logits, targets, keep, smoothing):
    """Mean label-smoothed cross-entropy over rows where ``keep`` is True.

    ``logits`` has shape (..., V) and ``targets``/``keep`` the leading shape.
    """
    v = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise InputError("cross-entropy over targets that are all padding")
    x2 = np.ascontiguousarray(logits.data.reshape(-1, v))
    rows, probs = K.smoothed_xent_fwd(x2, targets, smoothing)
    weights = keep / count
    loss = float((rows * weights).sum())
    shape = logits.shape

    def backward(g):
        gl = K.smoothed_xent_bwd(probs, targets, smoothing, weights)
        return (gl.reshape(shape) * g,)

    return _record(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls until reset with ``zero_grad``.
    """
    if loss.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {loss._id: np.ones(loss.shape)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + gp
            else:
                grads[p._id] = gp


Tensor.backward = backward
