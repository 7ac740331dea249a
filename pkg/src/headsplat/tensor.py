"""Dense numeric arrays with a reverse-mode differentiation tape.

Every trainable quantity in the repo is a `Tensor`: a numpy array plus an
optional slot on the global `Tape`. Operations record a backward rule as
they run; `backward(loss)` replays the tape once in reverse and deposits
gradients on the leaves. Default precision is float64 (for tight gradient
checks); call `set_default_dtype(np.float32)` for speed.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.float64
_IDS = itertools.count()


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs precede
    it (topological order by construction). `backward` therefore visits
    each node exactly once, in reverse.
    """

    def __init__(self):
        self.nodes = []          # (out_id, input_ids, backward_fn)
        self.leaves = {}         # id -> Tensor, for gradient deposit
        self.enabled = True

    def clear(self):
        self.nodes.clear()
        self.leaves.clear()

    def record(self, out_id, inputs, backward_fn):
        ids = []
        for t in inputs:
            ids.append(t._id)
            if t.requires_grad and t._creator is None:
                self.leaves[t._id] = t
        self.nodes.append((out_id, ids, backward_fn))


_TAPE = Tape()


def tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Suspend tape recording; values flow, gradients do not."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_id", "_creator")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(_IDS)
        self._creator = None     # tape node index, None for leaves

    # ------------------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, ref=None):
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _apply(out_data, inputs, backward_fn):
    """Wrap `out_data` in a Tensor, recording `backward_fn` if needed."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._creator = len(_TAPE.nodes)
        _TAPE.record(out._id, inputs, backward_fn)
    return out


def custom_op(inputs, out_data, backward_fn):
    """Record an arbitrary differentiable operation.

    `backward_fn(grad_out) -> tuple of gradients` aligned with `inputs`
    (entries may be None for inputs that need no gradient).
    """
    return _apply(np.asarray(out_data), list(inputs), backward_fn)


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply(out, [a, b], bwd)


def sub(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _apply(out, [a, b], bwd)


def mul(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply(out, [a, b], bwd)


def div(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _apply(out, [a, b], bwd)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1.0),)

    return _apply(out, [a], bwd)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _apply(out, [a], bwd)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _apply(out, [a], bwd)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return _apply(out, [a], bwd)


def absolute(a):
    a = as_tensor(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return _apply(out, [a], bwd)


def sin(a):
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * np.cos(ad),)

    return _apply(np.sin(ad), [a], bwd)


def cos(a):
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * -np.sin(ad),)

    return _apply(np.cos(ad), [a], bwd)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _apply(out, [a], bwd)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _apply(out, [a], bwd)


def _sigmoid_np(x):
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    ad = a.data

    def bwd(g):
        return (g * _sigmoid_np(ad),)

    return _apply(out, [a], bwd)


def leaky_softplus(a, negative_slope=0.01):
    """Smooth rectifier with asymptotic slope `negative_slope` below zero, 1 above."""
    a = as_tensor(a)
    s = float(negative_slope)
    sp = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    out = s * a.data + (1.0 - s) * sp
    ad = a.data

    def bwd(g):
        return (g * (s + (1.0 - s) * _sigmoid_np(ad)),)

    return _apply(out, [a], bwd)


def maximum(a, other):
    """Elementwise max against a constant (subgradient: ties go to `a`)."""
    a = as_tensor(a)
    const = np.asarray(other, dtype=a.data.dtype)
    out = np.maximum(a.data, const)
    mask = (a.data >= const).astype(a.data.dtype)

    def bwd(g):
        return (g * mask,)

    return _apply(out, [a], bwd)


# ----------------------------------------------------------------------
# reductions, shape ops


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply(np.asarray(out), [a], bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply(out, [a], bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _apply(out, [a], bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(out, tensors, bwd)


def take(a, idx):
    """Basic and integer-array indexing with summed-back gradients."""
    a = as_tensor(a)
    out = a.data[idx]
    shape = a.data.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _apply(np.asarray(out), [a], bwd)


def where_mask(mask, a, b):
    """Select `a` where boolean `mask` holds, else `b` (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b, a)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(np.where(m, g, 0.0), a.data.shape),
                _unbroadcast(np.where(m, 0.0, g), b.data.shape))

    return _apply(out, [a, b], bwd)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _apply(out, [a, b], bwd)


def linear(x, weight, bias=None):
    """Affine map `x @ weight + bias` with shape diagnostics."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(
            f"linear expects 2-d input and weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"linear shape mismatch: input {x.data.shape} is incompatible with "
            f"weight {weight.data.shape} (inner dims {x.data.shape[1]} != {weight.data.shape[0]})")
    out = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[1],):
            raise ValueError(
                f"linear bias shape {bias.data.shape} does not match output width "
                f"({weight.data.shape[1]},)")
        out = add(out, bias)
    return out


def normalize_rows(a, eps=0.0):
    """Rows scaled to unit Euclidean norm (composed, fully differentiable)."""
    a = as_tensor(a)
    sq = sum_(mul(a, a), axis=1, keepdims=True)
    return div(a, sqrt(add(sq, eps) if eps else sq))


# ----------------------------------------------------------------------
# small conv kernels for the image refiner


def conv2d(x, weight, bias=None):
    """3x3 (or kxk) same-padding convolution on an HWC image."""
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw, cin, cout = weight.data.shape
    h, w, c = x.data.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, h, w)                      # (h*w, kh*kw*cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(h, w, cout)
    if bias is not None:
        out = out + np.asarray(bias.data if isinstance(bias, Tensor) else bias)

    xd = x.data

    def bwd(g):
        gflat = g.reshape(h * w, cout)
        gw = (cols.T @ gflat).reshape(kh, kw, cin, cout)
        gcols = gflat @ wmat.T
        gx = _col2im(gcols, kh, kw, h, w, cin, ph, pw)
        gb = gflat.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = [x, weight] + ([bias] if isinstance(bias, Tensor) else [])
    if bias is not None and not isinstance(bias, Tensor):
        raise TypeError("conv2d bias must be a Tensor or None")
    return _apply(out, inputs, bwd)


def _im2col(xp, kh, kw, h, w):
    c = xp.shape[2]
    cols = np.empty((h, w, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + h, j:j + w, :]
    return cols.reshape(h * w, kh * kw * c)


def _col2im(gcols, kh, kw, h, w, c, ph, pw):
    g = gcols.reshape(h, w, kh, kw, c)
    gxp = np.zeros((h + 2 * ph, w + 2 * pw, c), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[i:i + h, j:j + w, :] += g[:, :, i, j, :]
    return gxp[ph:ph + h, pw:pw + w, :]


def upsample2x(x):
    """Nearest-neighbour x2 upsampling of an HWC image."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    h, w, c = x.data.shape

    def bwd(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return _apply(out, [x], bwd)


# ----------------------------------------------------------------------
# backward driver


def backward(loss):
    """Populate `.grad` on every leaf reachable from `loss`; consume the tape."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or loss._creator is None:
        raise ValueError("loss is detached from the tape (nothing to differentiate)")

    grads = {loss._id: np.ones_like(loss.data)}
    for out_id, input_ids, bwd in reversed(_TAPE.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        gins = bwd(g)
        for tid, gi in zip(input_ids, gins):
            if gi is None:
                continue
            if tid in grads:
                grads[tid] += gi
            else:
                grads[tid] = gi

    for tid, leaf in _TAPE.leaves.items():
        g = grads.get(tid)
        if g is not None:
            leaf.grad = g if leaf.grad is None else leaf.grad + g
    _TAPE.clear()
