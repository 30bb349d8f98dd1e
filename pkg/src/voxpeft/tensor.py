"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray and, when gradients are requested,
records the closure that pushes output gradients back to its parents.
``backward`` on a scalar loss walks the recorded graph once in reverse
topological order; gradients of tensors used more than once accumulate
additively. Everything is float64 and deterministic.
"""

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """n-dimensional float64 array, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _prev=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = _prev
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use pow_scalar")
        return mul(self, _wrap(1.0 / float(c)))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self):
        backward(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    """Build an op output; the closure is recorded only if a parent needs grads."""
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, _prev=tuple(parents) if rg else (), _op=op)
    if rg:
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the shape of the source operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Populate .grad on every requires_grad ancestor of a scalar loss."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def topo_order(root):
    """Iterative DFS topological order (parents before users)."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._prev))]
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def find_first_nan(root):
    """First node (in execution order) that produced a non-finite value.

    Returns (op_name, shape) or None. Used to build NaN-abort diagnostics.
    """
    for node in topo_order(root):
        if not np.all(np.isfinite(node.data)):
            if all(np.all(np.isfinite(p.data)) for p in node._prev):
                return node._op, node.data.shape
    return None


# -- elementwise and structural primitives ------------------------------------

def add(a, b):
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), "add", bw)


def sub(a, b):
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), "sub", bw)


def neg(a):
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), "neg", bw)


def mul(a, b):
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), "mul", bw)


def pow_scalar(a, p):
    p = float(p)
    out_data = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), f"pow[{p}]", bw)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out_data, (a, b), "matmul", bw)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), "reshape", bw)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(out_data, (a,), "transpose", bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, tuple(tensors), "concat", bw)


def slice_(a, key):
    out_data = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        _accum(a, ga)

    return _make(out_data, (a,), "slice", bw)


def sum_(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        _accum(a, _spread(g, a.data.shape, axis, keepdims))

    return _make(out_data, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in _norm_axes(axis, a.ndim)])

    def bw(g):
        _accum(a, _spread(g, a.data.shape, axis, keepdims) / n)

    return _make(out_data, (a,), "mean", bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g.item())
    if not keepdims:
        g = np.expand_dims(g, _norm_axes(axis, len(shape)))
    return np.broadcast_to(g, shape).copy()


# -- nonlinearities ------------------------------------------------------------

def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(out_data, (a,), "gelu", bw)


def softmax(a):
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), "softmax", bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine.

    Zero-variance rows normalize to zeros, so the output there is beta.
    """
    d = gamma.data.shape[-1]
    if x.shape[-1] != d or beta.data.shape != gamma.data.shape:
        raise DimensionError(f"layer_norm shapes disagree: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - gamma.data.ndim))
        _accum(gamma, (g * xhat).sum(axis=lead) if lead else g * xhat)
        _accum(beta, g.sum(axis=lead) if lead else g.copy())
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, invstd * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), "layer_norm", bw)


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes disagree: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out_data = np.array((diff * diff).mean())

    def bw(g):
        scale = 2.0 * float(g) / diff.size
        _accum(pred, scale * diff)
        _accum(target, -scale * diff)

    return _make(out_data, (pred, target), "mse_loss", bw)


# -- convolutions --------------------------------------------------------------

def conv3d(x, k, stride=1, pad=0):
    """Cross-correlation of x[ci,d,h,w] with kernel k[co,ci,kk,kk,kk]."""
    out_data = kernels.conv3d_forward(x.data, k.data, stride, pad)

    def bw(g):
        gx, gk = kernels.conv3d_backward(x.data, k.data, g, stride, pad)
        _accum(x, gx)
        _accum(k, gk)

    return _make(out_data, (x, k), "conv3d", bw)


def conv_transpose3d(x, k, stride=1, pad=0):
    """Transposed convolution of x[ci,d,h,w] with kernel k[ci,co,kk,kk,kk]."""
    out_data = kernels.conv_transpose3d_forward(x.data, k.data, stride, pad)

    def bw(g):
        gx, gk = kernels.conv_transpose3d_backward(x.data, k.data, g, stride, pad)
        _accum(x, gx)
        _accum(k, gk)

    return _make(out_data, (x, k), "conv_transpose3d", bw)


def dwconv3d(x, k, pad=0):
    """Depthwise stride-1 convolution of x[c,d,h,w] with kernel k[c,kk,kk,kk]."""
    out_data = kernels.dwconv3d_forward(x.data, k.data, pad)

    def bw(g):
        gx, gk = kernels.dwconv3d_backward(x.data, k.data, g, pad)
        _accum(x, gx)
        _accum(k, gk)

    return _make(out_data, (x, k), "dwconv3d", bw)
