"""3D convolution kernels: numba-jitted loops with a pure-numpy fallback.

These are the hot inner loops of the CNN decoder. Each operation exists as
``_*_nb`` (numba) and ``_*_np`` (vectorized numpy); the public functions
dispatch on :data:`voxpeft.backend.USE_NUMBA`. Both variants implement
cross-correlation semantics (no kernel flip) and agree to float64 round-off.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .backend import USE_NUMBA
from .errors import DimensionError

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _jit_conv3d_fw(xp, k, s):
        co_, ci_, kk = k.shape[0], k.shape[1], k.shape[2]
        do = (xp.shape[1] - kk) // s + 1
        ho = (xp.shape[2] - kk) // s + 1
        wo = (xp.shape[3] - kk) // s + 1
        y = np.empty((co_, do, ho, wo))
        acc = np.empty(wo)
        for co in range(co_):
            for zo in range(do):
                for yo in range(ho):
                    for xo in range(wo):
                        acc[xo] = 0.0
                    for ci in range(ci_):
                        for kz in range(kk):
                            zi = zo * s + kz
                            for ky in range(kk):
                                xrow = xp[ci, zi, yo * s + ky]
                                for kx in range(kk):
                                    w = k[co, ci, kz, ky, kx]
                                    for xo in range(wo):
                                        acc[xo] += w * xrow[kx + xo * s]
                    for xo in range(wo):
                        y[co, zo, yo, xo] = acc[xo]
        return y

    @njit(cache=True)
    def _jit_conv3d_gk(xp, gy, kk, s):
        co_, ci_ = gy.shape[0], xp.shape[0]
        do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
        gk = np.zeros((co_, ci_, kk, kk, kk))
        for co in range(co_):
            for ci in range(ci_):
                for kz in range(kk):
                    for ky in range(kk):
                        for kx in range(kk):
                            acc = 0.0
                            for zo in range(do):
                                zi = zo * s + kz
                                for yo in range(ho):
                                    xrow = xp[ci, zi, yo * s + ky]
                                    grow = gy[co, zo, yo]
                                    for xo in range(wo):
                                        acc += grow[xo] * xrow[kx + xo * s]
                            gk[co, ci, kz, ky, kx] = acc
        return gk

    @njit(cache=True)
    def _jit_conv3d_gx(k, gy, s, dp, hp, wp):
        co_, ci_, kk = k.shape[0], k.shape[1], k.shape[2]
        do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
        gxp = np.zeros((ci_, dp, hp, wp))
        for ci in range(ci_):
            for co in range(co_):
                for kz in range(kk):
                    for ky in range(kk):
                        for kx in range(kk):
                            w = k[co, ci, kz, ky, kx]
                            for zo in range(do):
                                zi = zo * s + kz
                                for yo in range(ho):
                                    xrow = gxp[ci, zi, yo * s + ky]
                                    grow = gy[co, zo, yo]
                                    for xo in range(wo):
                                        xrow[kx + xo * s] += w * grow[xo]
        return gxp

    @njit(cache=True)
    def _jit_convt3d_fw(x, k, s):
        ci_, co_, kk = k.shape[0], k.shape[1], k.shape[2]
        d, h, w_ = x.shape[1], x.shape[2], x.shape[3]
        full = np.zeros((co_, (d - 1) * s + kk, (h - 1) * s + kk, (w_ - 1) * s + kk))
        for co in range(co_):
            for ci in range(ci_):
                for kz in range(kk):
                    for ky in range(kk):
                        for kx in range(kk):
                            w = k[ci, co, kz, ky, kx]
                            for zi in range(d):
                                zo = zi * s + kz
                                for yi in range(h):
                                    orow = full[co, zo, yi * s + ky]
                                    xrow = x[ci, zi, yi]
                                    for xi in range(w_):
                                        orow[kx + xi * s] += w * xrow[xi]
        return full

    @njit(cache=True)
    def _jit_convt3d_gx(k, gfull, s, d, h, w_):
        ci_, co_, kk = k.shape[0], k.shape[1], k.shape[2]
        gx = np.zeros((ci_, d, h, w_))
        for ci in range(ci_):
            for co in range(co_):
                for kz in range(kk):
                    for ky in range(kk):
                        for kx in range(kk):
                            w = k[ci, co, kz, ky, kx]
                            for zi in range(d):
                                zo = zi * s + kz
                                for yi in range(h):
                                    grow = gfull[co, zo, yi * s + ky]
                                    xg = gx[ci, zi, yi]
                                    for xi in range(w_):
                                        xg[xi] += w * grow[kx + xi * s]
        return gx

    @njit(cache=True)
    def _jit_convt3d_gk(x, gfull, kk, s):
        ci_, co_ = x.shape[0], gfull.shape[0]
        d, h, w_ = x.shape[1], x.shape[2], x.shape[3]
        gk = np.zeros((ci_, co_, kk, kk, kk))
        for ci in range(ci_):
            for co in range(co_):
                for kz in range(kk):
                    for ky in range(kk):
                        for kx in range(kk):
                            acc = 0.0
                            for zi in range(d):
                                zo = zi * s + kz
                                for yi in range(h):
                                    grow = gfull[co, zo, yi * s + ky]
                                    xrow = x[ci, zi, yi]
                                    for xi in range(w_):
                                        acc += xrow[xi] * grow[kx + xi * s]
                            gk[ci, co, kz, ky, kx] = acc
        return gk

    @njit(cache=True)
    def _jit_dwconv3d_fw(xp, k):
        c_, kk = k.shape[0], k.shape[1]
        do = xp.shape[1] - kk + 1
        ho = xp.shape[2] - kk + 1
        wo = xp.shape[3] - kk + 1
        y = np.empty((c_, do, ho, wo))
        acc = np.empty(wo)
        for c in range(c_):
            for zo in range(do):
                for yo in range(ho):
                    for xo in range(wo):
                        acc[xo] = 0.0
                    for kz in range(kk):
                        for ky in range(kk):
                            xrow = xp[c, zo + kz, yo + ky]
                            for kx in range(kk):
                                w = k[c, kz, ky, kx]
                                for xo in range(wo):
                                    acc[xo] += w * xrow[kx + xo]
                    for xo in range(wo):
                        y[c, zo, yo, xo] = acc[xo]
        return y

    @njit(cache=True)
    def _jit_dwconv3d_bw(xp, k, gy):
        c_, kk = k.shape[0], k.shape[1]
        do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
        gxp = np.zeros(xp.shape)
        gk = np.zeros(k.shape)
        for c in range(c_):
            for kz in range(kk):
                for ky in range(kk):
                    for kx in range(kk):
                        w = k[c, kz, ky, kx]
                        acc = 0.0
                        for zo in range(do):
                            for yo in range(ho):
                                grow = gy[c, zo, yo]
                                xrow = xp[c, zo + kz, yo + ky]
                                gxrow = gxp[c, zo + kz, yo + ky]
                                for xo in range(wo):
                                    acc += grow[xo] * xrow[kx + xo]
                                    gxrow[kx + xo] += w * grow[xo]
                        gk[c, kz, ky, kx] = acc
        return gxp, gk


def _pad4(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _check_conv_shapes(x, k, stride, pad, transposed):
    if x.ndim != 4 or k.ndim != 5:
        raise DimensionError(f"conv expects 4-d input and 5-d kernel, got {x.shape} and {k.shape}")
    cin_axis = 0 if transposed else 1
    if k.shape[cin_axis] != x.shape[0]:
        raise DimensionError(f"kernel {k.shape} does not accept {x.shape[0]} input channels")
    if not (k.shape[2] == k.shape[3] == k.shape[4]):
        raise DimensionError(f"kernel must be cubic, got {k.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"bad stride/pad ({stride}, {pad})")
    kk = k.shape[2]
    if transposed:
        for n in x.shape[1:]:
            if (n - 1) * stride - 2 * pad + kk < 1:
                raise DimensionError(f"transposed conv of {x.shape} with k={kk}, stride={stride}, pad={pad} has empty output")
    else:
        for n in x.shape[1:]:
            if n + 2 * pad < kk:
                raise DimensionError(f"kernel size {kk} exceeds padded input {x.shape} (pad={pad})")


def conv3d_out_size(n, kk, stride, pad):
    return (n + 2 * pad - kk) // stride + 1


# -- pure-numpy implementations ----------------------------------------------

def _conv3d_fw_np(x, k, s, p):
    xp = _pad4(x, p)
    kk = k.shape[2]
    win = sliding_window_view(xp, (kk, kk, kk), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    return np.einsum("cdhwijk,ocijk->odhw", win, k, optimize=True)


def _conv3d_bw_np(x, k, gy, s, p):
    xp = _pad4(x, p)
    kk = k.shape[2]
    win = sliding_window_view(xp, (kk, kk, kk), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    gk = np.einsum("cdhwijk,odhw->ocijk", win, gy, optimize=True)
    gxp = np.zeros_like(xp)
    do, ho, wo = gy.shape[1:]
    for kz in range(kk):
        for ky in range(kk):
            for kx in range(kk):
                contrib = np.einsum("odhw,oc->cdhw", gy, k[:, :, kz, ky, kx], optimize=True)
                gxp[:, kz:kz + s * do:s, ky:ky + s * ho:s, kx:kx + s * wo:s] += contrib
    if p:
        gxp = gxp[:, p:-p, p:-p, p:-p]
    return gxp, gk


def _convt3d_full_np(x, k, s):
    kk = k.shape[2]
    d, h, w_ = x.shape[1:]
    co = k.shape[1]
    full = np.zeros((co, (d - 1) * s + kk, (h - 1) * s + kk, (w_ - 1) * s + kk))
    for kz in range(kk):
        for ky in range(kk):
            for kx in range(kk):
                contrib = np.einsum("cdhw,co->odhw", x, k[:, :, kz, ky, kx], optimize=True)
                full[:, kz:kz + s * d:s, ky:ky + s * h:s, kx:kx + s * w_:s] += contrib
    return full


def _convt3d_fw_np(x, k, s, p):
    full = _convt3d_full_np(x, k, s)
    return _crop_transpose_output(full, x.shape, k.shape[2], s, p)


def _convt3d_bw_np(x, k, gy, s, p):
    gfull = _embed_transpose_grad(gy, x.shape, k.shape[2], s, p)
    kk = k.shape[2]
    d, h, w_ = x.shape[1:]
    gx = np.zeros_like(x)
    gk = np.empty_like(k)
    for kz in range(kk):
        for ky in range(kk):
            for kx in range(kk):
                gslice = gfull[:, kz:kz + s * d:s, ky:ky + s * h:s, kx:kx + s * w_:s]
                gx += np.einsum("odhw,co->cdhw", gslice, k[:, :, kz, ky, kx], optimize=True)
                gk[:, :, kz, ky, kx] = np.einsum("cdhw,odhw->co", x, gslice, optimize=True)
    return gx, gk


def _dwconv3d_fw_np(x, k, p):
    xp = _pad4(x, p)
    kk = k.shape[1]
    win = sliding_window_view(xp, (kk, kk, kk), axis=(1, 2, 3))
    return np.einsum("cdhwijk,cijk->cdhw", win, k, optimize=True)


def _dwconv3d_bw_np(x, k, gy, p):
    xp = _pad4(x, p)
    kk = k.shape[1]
    win = sliding_window_view(xp, (kk, kk, kk), axis=(1, 2, 3))
    gk = np.einsum("cdhwijk,cdhw->cijk", win, gy, optimize=True)
    gxp = np.zeros_like(xp)
    do, ho, wo = gy.shape[1:]
    for kz in range(kk):
        for ky in range(kk):
            for kx in range(kk):
                gxp[:, kz:kz + do, ky:ky + ho, kx:kx + wo] += gy * k[:, kz, ky, kx][:, None, None, None]
    if p:
        gxp = gxp[:, p:-p, p:-p, p:-p]
    return gxp, gk


# -- numba-backed implementations (same signatures) ---------------------------

def _conv3d_fw_nb(x, k, s, p):
    return _jit_conv3d_fw(_ascont(_pad4(x, p)), _ascont(k), s)


def _conv3d_bw_nb(x, k, gy, s, p):
    xp = _ascont(_pad4(x, p))
    gy = _ascont(gy)
    k = _ascont(k)
    gk = _jit_conv3d_gk(xp, gy, k.shape[2], s)
    gxp = _jit_conv3d_gx(k, gy, s, xp.shape[1], xp.shape[2], xp.shape[3])
    if p:
        gxp = gxp[:, p:-p, p:-p, p:-p]
    return gxp, gk


def _convt3d_fw_nb(x, k, s, p):
    full = _jit_convt3d_fw(_ascont(x), _ascont(k), s)
    return _crop_transpose_output(full, x.shape, k.shape[2], s, p)


def _convt3d_bw_nb(x, k, gy, s, p):
    gfull = _ascont(_embed_transpose_grad(gy, x.shape, k.shape[2], s, p))
    x = _ascont(x)
    k = _ascont(k)
    d, h, w_ = x.shape[1:]
    gx = _jit_convt3d_gx(k, gfull, s, d, h, w_)
    gk = _jit_convt3d_gk(x, gfull, k.shape[2], s)
    return gx, gk


def _dwconv3d_fw_nb(x, k, p):
    return _jit_dwconv3d_fw(_ascont(_pad4(x, p)), _ascont(k))


def _dwconv3d_bw_nb(x, k, gy, p):
    gxp, gk = _jit_dwconv3d_bw(_ascont(_pad4(x, p)), _ascont(k), _ascont(gy))
    if p:
        gxp = gxp[:, p:-p, p:-p, p:-p]
    return gxp, gk


def _ascont(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _crop_transpose_output(full, x_shape, kk, s, p):
    out = [(n - 1) * s - 2 * p + kk for n in x_shape[1:]]
    return full[:, p:p + out[0], p:p + out[1], p:p + out[2]]


def _embed_transpose_grad(gy, x_shape, kk, s, p):
    co = gy.shape[0]
    full_dims = [(n - 1) * s + kk for n in x_shape[1:]]
    gfull = np.zeros((co, *full_dims))
    gfull[:, p:p + gy.shape[1], p:p + gy.shape[2], p:p + gy.shape[3]] = gy
    return gfull


# -- public dispatch -----------------------------------------------------------

def conv3d_forward(x, k, stride=1, pad=0):
    """Cross-correlate x[ci,d,h,w] with k[co,ci,kk,kk,kk]."""
    _check_conv_shapes(x, k, stride, pad, transposed=False)
    fn = _conv3d_fw_nb if USE_NUMBA else _conv3d_fw_np
    return fn(x, k, stride, pad)


def conv3d_backward(x, k, gy, stride=1, pad=0):
    """Gradients of conv3d_forward w.r.t. input and kernel."""
    fn = _conv3d_bw_nb if USE_NUMBA else _conv3d_bw_np
    return fn(x, k, gy, stride, pad)


def conv_transpose3d_forward(x, k, stride=1, pad=0):
    """Transposed convolution of x[ci,d,h,w] with k[ci,co,kk,kk,kk]."""
    _check_conv_shapes(x, k, stride, pad, transposed=True)
    fn = _convt3d_fw_nb if USE_NUMBA else _convt3d_fw_np
    return fn(x, k, stride, pad)


def conv_transpose3d_backward(x, k, gy, stride=1, pad=0):
    fn = _convt3d_bw_nb if USE_NUMBA else _convt3d_bw_np
    return fn(x, k, gy, stride, pad)


def dwconv3d_forward(x, k, pad=0):
    """Depthwise (per-channel) stride-1 convolution, x[c,d,h,w], k[c,kk,kk,kk]."""
    if x.ndim != 4 or k.ndim != 4 or k.shape[0] != x.shape[0]:
        raise DimensionError(f"depthwise conv shapes {x.shape} / {k.shape} do not match")
    fn = _dwconv3d_fw_nb if USE_NUMBA else _dwconv3d_fw_np
    return fn(x, k, pad)


def dwconv3d_backward(x, k, gy, pad=0):
    fn = _dwconv3d_bw_nb if USE_NUMBA else _dwconv3d_bw_np
    return fn(x, k, gy, pad)
