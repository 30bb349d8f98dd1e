"""Centered finite-difference checking of analytic gradients.

The numeric side perturbs raw ``.data`` in place and re-runs the op, so it
never touches the code path that produced the analytic gradient. The error
reported per input tensor is max|analytic - numeric| / max(1, max|numeric|),
i.e. relative to the gradient's own scale with an absolute floor of one.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def fd_gradients(f, tensors, h=1e-5, indices=None):
    """Centered finite differences of scalar f(*tensors) w.r.t. each tensor.

    ``indices`` optionally restricts each tensor to a subset of flat entries
    (unprobed entries report gradient 0 and must be masked by the caller).
    """
    grads = []
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        idx = range(flat.size) if indices is None else indices[ti]
        g = np.zeros(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*tensors).item()
            flat[i] = orig - h
            fm = f(*tensors).item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def analytic_gradients(f, tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f(*tensors)
    T.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def max_rel_error(f, tensors, h=1e-5, sample=None, rng=None):
    """Worst relative disagreement between analytic and FD gradients."""
    analytic = analytic_gradients(f, tensors)
    indices = None
    if sample is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = [
            rng.choice(t.size, size=min(sample, t.size), replace=False)
            for t in tensors
        ]
    numeric = fd_gradients(f, tensors, h, indices)
    worst = 0.0
    for ti, (a, n) in enumerate(zip(analytic, numeric)):
        af, nf = a.reshape(-1), n.reshape(-1)
        sel = indices[ti] if indices is not None else slice(None)
        diff = np.abs(af[sel] - nf[sel]).max()
        denom = max(1.0, np.abs(nf[sel]).max())
        worst = max(worst, diff / denom)
    return worst


def _weighted_sum(out, weights):
    return T.sum_(T.mul(out, Tensor(weights)))


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _case_add(rng):
    w = rng.uniform(-1, 1, size=(3, 4))
    return lambda a, b: _weighted_sum(T.add(a, b), w), [_rand(rng, 3, 4), _rand(rng, 4)]


def _case_mul(rng):
    w = rng.uniform(-1, 1, size=(3, 4))
    return lambda a, b: _weighted_sum(T.mul(a, b), w), [_rand(rng, 3, 4), _rand(rng, 3, 1)]


def _case_sub(rng):
    w = rng.uniform(-1, 1, size=(2, 3))
    return lambda a, b: _weighted_sum(T.sub(a, b), w), [_rand(rng, 2, 3), _rand(rng, 2, 3)]


def _case_pow(rng):
    w = rng.uniform(-1, 1, size=(3, 3))
    return lambda a: _weighted_sum(T.pow_scalar(a, 3), w), [_rand(rng, 3, 3)]


def _case_matmul(rng):
    w = rng.uniform(-1, 1, size=(3, 2))
    return lambda a, b: _weighted_sum(T.matmul(a, b), w), [_rand(rng, 3, 4), _rand(rng, 4, 2)]


def _case_matmul_batched(rng):
    w = rng.uniform(-1, 1, size=(2, 3, 5))
    return lambda a, b: _weighted_sum(T.matmul(a, b), w), [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)]


def _case_reshape_transpose(rng):
    w = rng.uniform(-1, 1, size=(4, 3, 2))

    def f(a):
        return _weighted_sum(T.transpose(T.reshape(a, (2, 3, 4)), (2, 1, 0)), w)

    return f, [_rand(rng, 24)]


def _case_concat(rng):
    w = rng.uniform(-1, 1, size=(5, 3))
    return lambda a, b: _weighted_sum(T.concat([a, b], axis=0), w), [_rand(rng, 2, 3), _rand(rng, 3, 3)]


def _case_slice(rng):
    w = rng.uniform(-1, 1, size=(2, 2))
    return lambda a: _weighted_sum(T.slice_(a, (slice(1, 3), slice(0, 2))), w), [_rand(rng, 4, 3)]


def _case_sum(rng):
    w = rng.uniform(-1, 1, size=(4,))
    return lambda a: _weighted_sum(T.sum_(a, axis=0), w), [_rand(rng, 3, 4)]


def _case_mean(rng):
    w = rng.uniform(-1, 1, size=(3, 1))
    return lambda a: _weighted_sum(T.mean(a, axis=1, keepdims=True), w), [_rand(rng, 3, 4)]


def _case_softmax(rng):
    w = rng.uniform(-1, 1, size=(3, 5))
    return lambda a: _weighted_sum(T.softmax(a), w), [_rand(rng, 3, 5)]


def _case_gelu(rng):
    w = rng.uniform(-1, 1, size=(4, 4))
    return lambda a: _weighted_sum(T.gelu(a), w), [_rand(rng, 4, 4)]


def _case_layer_norm(rng):
    w = rng.uniform(-1, 1, size=(2, 5))
    return (
        lambda x, g, b: _weighted_sum(T.layer_norm(x, g, b), w),
        [_rand(rng, 2, 5), _rand(rng, 5), _rand(rng, 5)],
    )


def _case_mse(rng):
    return lambda a, b: T.mse_loss(a, b), [_rand(rng, 3, 4), _rand(rng, 3, 4)]


def _case_conv3d(rng):
    w = rng.uniform(-1, 1, size=(3, 2, 2, 2))
    return lambda x, k: _weighted_sum(T.conv3d(x, k), w), [_rand(rng, 2, 4, 4, 4), _rand(rng, 3, 2, 3, 3, 3)]


def _case_conv3d_strided(rng):
    w = rng.uniform(-1, 1, size=(3, 3, 3, 3))
    return (
        lambda x, k: _weighted_sum(T.conv3d(x, k, stride=2, pad=1), w),
        [_rand(rng, 2, 5, 5, 5), _rand(rng, 3, 2, 2, 2, 2)],
    )


def _case_conv_transpose3d(rng):
    w = rng.uniform(-1, 1, size=(3, 6, 6, 6))
    return (
        lambda x, k: _weighted_sum(T.conv_transpose3d(x, k, stride=2), w),
        [_rand(rng, 2, 3, 3, 3), _rand(rng, 2, 3, 2, 2, 2)],
    )


def _case_conv_transpose3d_padded(rng):
    w = rng.uniform(-1, 1, size=(2, 5, 5, 5))
    return (
        lambda x, k: _weighted_sum(T.conv_transpose3d(x, k, stride=2, pad=1), w),
        [_rand(rng, 3, 3, 3, 3), _rand(rng, 3, 2, 3, 3, 3)],
    )


def _case_dwconv3d(rng):
    w = rng.uniform(-1, 1, size=(3, 4, 4, 4))
    return lambda x, k: _weighted_sum(T.dwconv3d(x, k, pad=1), w), [_rand(rng, 3, 4, 4, 4), _rand(rng, 3, 3, 3, 3)]


PRIMITIVE_CASES = [
    ("add", _case_add),
    ("sub", _case_sub),
    ("mul", _case_mul),
    ("pow_scalar", _case_pow),
    ("matmul", _case_matmul),
    ("matmul_batched", _case_matmul_batched),
    ("reshape_transpose", _case_reshape_transpose),
    ("concat", _case_concat),
    ("slice", _case_slice),
    ("sum", _case_sum),
    ("mean", _case_mean),
    ("softmax", _case_softmax),
    ("gelu", _case_gelu),
    ("layer_norm", _case_layer_norm),
    ("mse_loss", _case_mse),
    ("conv3d", _case_conv3d),
    ("conv3d_strided", _case_conv3d_strided),
    ("conv_transpose3d", _case_conv_transpose3d),
    ("conv_transpose3d_padded", _case_conv_transpose3d_padded),
    ("dwconv3d", _case_dwconv3d),
]


def run_case(name, seed=0, h=1e-5):
    builder = dict(PRIMITIVE_CASES)[name]
    f, tensors = builder(np.random.default_rng(seed))
    return max_rel_error(f, tensors, h=h)


def run_all(seed=0, h=1e-5):
    """Check every primitive; returns {name: max relative error}."""
    return {name: run_case(name, seed=seed, h=h) for name, _ in PRIMITIVE_CASES}
