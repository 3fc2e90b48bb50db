"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations run eagerly on numpy arrays. When a :class:`GradTape` is active and
an input requires gradients, the result is appended to the tape together with
a closure mapping the output gradient to input gradients. Recording order is
a topological order, so :func:`backward` is a single reverse sweep.
"""
import math
import threading

import numpy as np

from . import _kernels

NEG_SENTINEL = -1e30

_local = threading.local()


class Tensor:
    """An n-d float64 array, optionally tracked by the active tape.

    Identity (not value) is used for hashing, so tensors can key gradient
    maps directly.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of the operations executed while it is active."""

    def __init__(self):
        self.nodes = []

    def record(self, t):
        self.nodes.append(t)

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    if not np.isfinite(data).all():
        raise FloatingPointError("operation produced a non-finite value")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ga, gb = a.requires_grad, b.requires_grad
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if ga else None,
                              _unbroadcast(g, sb) if gb else None))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ga, gb = a.requires_grad, b.requires_grad
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if ga else None,
                              _unbroadcast(-g, sb) if gb else None))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if ga else None,
                _unbroadcast(g * ad, bd.shape) if gb else None)

    return _result(ad * bd, (a, b), bw)


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def _matmul_data(x, w):
    """x (..., m, k) times w either (k, n) or (..., k, n) with equal batch dims."""
    if w.ndim == 2:
        lead = x.shape[:-1]
        out = _kernels.matmul2d(x.reshape(-1, x.shape[-1]), w)
        return out.reshape(*lead, w.shape[1])
    if x.shape[:-2] != w.shape[:-2]:
        raise ValueError(f"batch dimensions differ: {x.shape} vs {w.shape}")
    lead = x.shape[:-2]
    out = _kernels.bmm(x.reshape(-1, *x.shape[-2:]), w.reshape(-1, *w.shape[-2:]))
    return out.reshape(*lead, x.shape[-2], w.shape[-1])


def matmul(a, b):
    """Row-major dense product; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"inner dimensions differ: {ad.shape} @ {bd.shape}")
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = gb = None
        if bd.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if need_a:
                ga = _kernels.matmul2d(g2, bd.T).reshape(ad.shape)
            if need_b:
                gb = _kernels.matmul2d(ad.reshape(-1, ad.shape[-1]).T, g2)
            return ga, gb
        if need_a:
            ga = _matmul_data(g, np.swapaxes(bd, -1, -2))
        if need_b:
            gb = _matmul_data(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(_matmul_data(ad, bd), (a, b), bw)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(a):
    """Swap the last two axes."""
    axes = list(range(as_tensor(a).ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return permute(a, axes)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def take(a, axis, start, stop):
    """Contiguous slice along one axis; the backward pass scatters into zeros."""
    a = as_tensor(a)
    shape = a.shape
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), bw)


def split(a, sizes, axis):
    out = []
    lo = 0
    for s in sizes:
        out.append(take(a, axis, lo, lo + s))
        lo += s
    return out


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_lastdim(x):
    """Stable softmax over the last axis.

    Rows that are entirely masked (``-inf`` or the bias sentinel) map to zeros.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last dimension")
    shape = x.shape
    y = _kernels.softmax_rows(x.data.reshape(-1, shape[-1])).reshape(shape)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def layer_norm(x, eps=1e-6):
    """Normalise each row of the last axis to zero mean and unit variance."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise ValueError("layer_norm needs a last dimension of at least 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (x,), bw)


def silu(x):
    x = as_tensor(x)
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))

    def bw(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return _result(xd * s, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(0.5 * xd * (1.0 + t), (x,), bw)


def mse(pred, target):
    """Mean squared error; ``target`` is treated as a constant."""
    pred = as_tensor(pred)
    td = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    diff = pred.data - td
    n = diff.size
    return _result(np.asarray((diff * diff).sum() / n), (pred,),
                   lambda g: (g * (2.0 / n) * diff,))


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(loss, params=None):
    """Gradients of a scalar ``loss`` with respect to leaf tensors.

    Returns ``{tensor: ndarray}`` for every leaf that requires gradients and is
    reachable. Tensors listed in ``params`` but not reachable get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss.backward_fn is not None:
        tape = _tape_of(loss)
        pos = _index_on_tape(tape, loss)
        for node in reversed(tape.nodes[:pos + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.backward_fn is None:
                    leaves[key] = parent
    elif loss.requires_grad:
        leaves[id(loss)] = loss
    out = {t: grads[k] for k, t in leaves.items()}
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.data)
    return out


def _tape_of(t):
    stack = getattr(_local, "stack", None) or []
    for tape in reversed(stack):
        if tape.nodes and _index_on_tape(tape, t) is not None:
            return tape
    raise RuntimeError("loss was not recorded on an active tape")


def _index_on_tape(tape, t):
    # Last recorded node is by far the common case.
    if tape.nodes and tape.nodes[-1] is t:
        return len(tape.nodes) - 1
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i] is t:
            return i
    return None


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter update rule)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        self.t += 1
        if self.lr == 0.0:
            return
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
