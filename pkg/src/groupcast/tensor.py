"""Dense tensors with reverse-mode differentiation.

A small tape engine over numpy arrays: each operation returns a new Tensor
and, while gradients are enabled, records a closure that propagates the
output gradient to its parents. Gradients accumulate additively and every
recorded node is visited exactly once by ``backward``.

Reductions use fixed numpy evaluation order, so repeated runs on the same
machine are bit-identical. 64-bit is the default precision; 32-bit arrays
pass through unchanged for speed-over-accuracy runs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, GraphError

DEFAULT_DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)

# -- flop accounting ---------------------------------------------------------

_flop_counter = None


class FlopCount:
    """Mutable counter filled in by operations under ``count_flops``."""

    def __init__(self):
        self.total = 0


@contextmanager
def count_flops():
    """Count (approximate) floating-point operations of enclosed forwards."""
    global _flop_counter
    prev = _flop_counter
    counter = FlopCount()
    _flop_counter = counter
    try:
        yield counter
    finally:
        _flop_counter = prev


def _bump(n):
    if _flop_counter is not None:
        _flop_counter.total += int(n)


# -- gradient mode -----------------------------------------------------------

_grad_enabled = True


@contextmanager
def no_grad():
    """Skip tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A shaped numeric value, optionally recorded on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # shape helpers
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
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g)  # own storage; closures may pass views
        else:
            self.grad += g


class Parameter(Tensor):
    """A named learnable tensor; gradient buffer always allocated."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def _node(data, parents, backward):
    """Create a result tensor, recording the closure only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _bump(out.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _bump(out.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _bump(out.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def matmul(a, b):
    """Matrix product with broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _bump(2 * out.size // out.shape[-1] * a.shape[-1] * out.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


def texp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    _bump(8 * out.size)

    def backward(g):
        a._accumulate(g * out)

    return _node(out, (a,), backward)


def tlog(a):
    a = as_tensor(a)
    out = np.log(a.data)
    _bump(8 * out.size)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(out, (a,), backward)


def tabs(a):
    a = as_tensor(a)
    out = np.abs(a.data)
    _bump(out.size)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _node(out, (a,), backward)


def maximum_const(a, floor):
    """Elementwise max(a, floor); gradient flows only where a > floor."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    _bump(out.size)

    def backward(g):
        a._accumulate(g * (a.data > floor))

    return _node(out, (a,), backward)


def gelu(a):
    """Smooth rectifier (tanh form)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    _bump(14 * out.size)

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * d)

    return _node(out, (a,), backward)


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    _bump(a.size)

    def backward(g):
        if axis is None:
            a._accumulate(np.full(a.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward)


def broadcast_to(a, shape):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _node(np.broadcast_to(a.data, shape), (a,), backward)


def take(a, indices, axis):
    """Select rows along ``axis``; duplicate indices allowed."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        key = (slice(None),) * axis + (idx,)
        np.add.at(ga, key, g)
        a._accumulate(ga)

    return _node(out, (a,), backward)


def scatter(a, indices, axis, size):
    """Place rows of ``a`` into a zero tensor whose ``axis`` has ``size`` slots.

    Indices must be unique; the inverse of ``take`` on distinct positions.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.dtype)
    key = (slice(None),) * axis + (idx,)
    out[key] = a.data

    def backward(g):
        a._accumulate(g[key])

    return _node(out, (a,), backward)


def take_slice(a, key):
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        a._accumulate(ga)

    return _node(out, (a,), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _node(out, tuple(tensors), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, gp in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(gp)

    return _node(out, tuple(tensors), backward)


# -- fused neural-net primitives ----------------------------------------------

def softmax(a, axis=-1):
    """Stable softmax: max-subtracted exponentials normalized along ``axis``."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _bump(12 * out.size)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _node(out, (a,), backward)


def layer_norm(a, gain, bias, axis=-1, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis``, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[axis]
    if d < 1:
        raise DimensionError("layer_norm axis extent must be >= 1")
    bshape = [1] * a.ndim
    bshape[axis] = d
    gm = gain.data.reshape(bshape)
    bm = bias.data.reshape(bshape)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gm + bm
    _bump(10 * out.size)

    def backward(g):
        gy = g * gm
        if a.requires_grad:
            m1 = gy.mean(axis=axis, keepdims=True)
            m2 = (gy * y).mean(axis=axis, keepdims=True)
            a._accumulate(inv * (gy - m1 - y * m2))
        red = tuple(i for i in range(a.ndim) if i != (axis % a.ndim))
        if gain.requires_grad:
            gain._accumulate((g * y).sum(axis=red))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=red))

    return _node(out, (a, gain, bias), backward)


def mvn_nll(resid, sigma):
    """Per-slice Gaussian negative log likelihoods.

    resid: [..., S] residual vectors, sigma: [..., S, S] covariance slices
    (symmetrized internally). Returns [...] values
    0.5 * (S log 2pi + log|W| + r^T W^-1 r). Raises PositiveDefinitenessError
    (carrying the failing batch index) when any slice is not PD.
    """
    from .errors import PositiveDefinitenessError

    resid, sigma = as_tensor(resid), as_tensor(sigma)
    s = resid.shape[-1]
    if sigma.shape[-2:] != (s, s):
        raise DimensionError(f"covariance {sigma.shape} does not match residual {resid.shape}")
    w = 0.5 * (sigma.data + np.swapaxes(sigma.data, -1, -2))
    try:
        chol = np.linalg.cholesky(w)
    except np.linalg.LinAlgError:
        idx = _first_non_pd(w)
        raise PositiveDefinitenessError(
            f"covariance slice {idx} is not positive definite") from None
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    z = np.linalg.solve(chol, resid.data[..., None])
    alpha = np.linalg.solve(np.swapaxes(chol, -1, -2), z)[..., 0]
    quad = (z[..., 0] ** 2).sum(axis=-1)
    out = 0.5 * (s * math.log(2.0 * math.pi) + logdet + quad)
    _bump(out.size * (2 * s ** 3 + 6 * s * s))

    def backward(g):
        if resid.requires_grad:
            resid._accumulate(g[..., None] * alpha)
        if sigma.requires_grad:
            winv = np.linalg.inv(w)
            outer = alpha[..., :, None] * alpha[..., None, :]
            sigma._accumulate(g[..., None, None] * 0.5 * (winv - outer))

    return _node(out, (resid, sigma), backward)


def _first_non_pd(w):
    flat = w.reshape(-1, w.shape[-1], w.shape[-1])
    for i in range(flat.shape[0]):
        try:
            np.linalg.cholesky(flat[i])
        except np.linalg.LinAlgError:
            return np.unravel_index(i, w.shape[:-2])
    return ()


def aggregate_rows(a, groups):
    """Stack fixed-order sums of leading-axis rows.

    groups: sequence of index lists; output row k is the running sum of
    a[i] over i in groups[k], accumulated left to right so results are exact
    with respect to that order.
    """
    a = as_tensor(a)
    rows = []
    for grp in groups:
        acc = a.data[grp[0]].copy()
        for i in grp[1:]:
            acc = acc + a.data[i]
        rows.append(acc)
    out = np.stack(rows, axis=0)

    def backward(g):
        ga = np.zeros_like(a.data)
        for k, grp in enumerate(groups):
            for i in grp:
                ga[i] += g[k]
        a._accumulate(ga)

    return _node(out, (a,), backward)


# -- tape walk ----------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(node) into every recorded node's ``grad``."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss was not produced through recorded operations")

    topo = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if not isinstance(node, Parameter) and node is not loss:
            node.grad = None  # free intermediate buffers early


# -- initialization -----------------------------------------------------------

def uniform_init(rng, fan_in, fan_out, shape, dtype=None):
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype or DEFAULT_DTYPE)
