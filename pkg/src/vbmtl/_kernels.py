"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``VBMTL_NUMBA=0`` to force the
numpy implementations (useful for debugging and for the benchmark in
``benchmarks/bench_kernels.py``). Both paths compute the same float64 results
up to summation order.
"""
import os

import numpy as np

_want_numba = os.environ.get("VBMTL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _want_numba:
        raise ImportError("numba disabled by VBMTL_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_np(xpad, kernel, stride, n_out):
    # xpad: (N, Lp, C) -> (N, n_out, kernel * C), window-major then channel
    n, _, c = xpad.shape
    sn, sl, sc = xpad.strides
    view = np.lib.stride_tricks.as_strided(
        xpad, shape=(n, n_out, kernel, c), strides=(sn, sl * stride, sl, sc), writeable=False
    )
    return view.reshape(n, n_out, kernel * c)


def col2im_np(dcols, length, kernel, stride):
    n, n_out, kc = dcols.shape
    c = kc // kernel
    d4 = dcols.reshape(n, n_out, kernel, c)
    out = np.zeros((n, length, c))
    stop = stride * (n_out - 1) + 1
    for j in range(kernel):
        out[:, j:j + stop:stride, :] += d4[:, :, j, :]
    return out


def layer_norm_fwd_np(x2d, eps):
    mu = x2d.mean(axis=1, keepdims=True)
    xc = x2d - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layer_norm_bwd_np(dxhat, xhat, rstd):
    # gradient w.r.t. the un-normalised input given dL/dxhat
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd[:, None]


def softmax_fwd_np(x2d):
    z = x2d - x2d.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xpad, kernel, stride, n_out):
        n, _, c = xpad.shape
        out = np.empty((n, n_out, kernel * c))
        for b in range(n):
            for t in range(n_out):
                base = t * stride
                for j in range(kernel):
                    for ch in range(c):
                        out[b, t, j * c + ch] = xpad[b, base + j, ch]
        return out

    @njit(cache=True)
    def _col2im_nb(dcols, length, kernel, stride):
        n, n_out, kc = dcols.shape
        c = kc // kernel
        out = np.zeros((n, length, c))
        for b in range(n):
            for t in range(n_out):
                base = t * stride
                for j in range(kernel):
                    for ch in range(c):
                        out[b, base + j, ch] += dcols[b, t, j * c + ch]
        return out

    @njit(cache=True)
    def _layer_norm_fwd_nb(x2d, eps):
        rows, cols = x2d.shape
        xhat = np.empty_like(x2d)
        rstd = np.empty(rows)
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x2d[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x2d[i, j] - mu
                var += d * d
            var /= cols
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(cols):
                xhat[i, j] = (x2d[i, j] - mu) * r
        return xhat, rstd

    @njit(cache=True)
    def _layer_norm_bwd_nb(dxhat, xhat, rstd):
        rows, cols = dxhat.shape
        dx = np.empty_like(dxhat)
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                m1 += dxhat[i, j]
                m2 += dxhat[i, j] * xhat[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                dx[i, j] = (dxhat[i, j] - m1 - xhat[i, j] * m2) * rstd[i]
        return dx

    @njit(cache=True)
    def _softmax_fwd_nb(x2d):
        rows, cols = x2d.shape
        y = np.empty_like(x2d)
        for i in range(rows):
            mx = x2d[i, 0]
            for j in range(1, cols):
                if x2d[i, j] > mx:
                    mx = x2d[i, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x2d[i, j] - mx)
                y[i, j] = e
                s += e
            for j in range(cols):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def _softmax_bwd_nb(y, dy):
        rows, cols = y.shape
        dx = np.empty_like(y)
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += dy[i, j] * y[i, j]
            for j in range(cols):
                dx[i, j] = y[i, j] * (dy[i, j] - s)
        return dx

    # the strided-view gather beats the compiled loop; both backends use it
    im2col = im2col_np

    def col2im(dcols, length, kernel, stride):
        return _col2im_nb(np.ascontiguousarray(dcols), length, kernel, stride)

    def layer_norm_fwd(x2d, eps):
        return _layer_norm_fwd_nb(np.ascontiguousarray(x2d), eps)

    def layer_norm_bwd(dxhat, xhat, rstd):
        return _layer_norm_bwd_nb(np.ascontiguousarray(dxhat), xhat, rstd)

    # numpy's vectorised exp wins here too; the compiled loop is kept for the benchmark
    softmax_fwd = softmax_fwd_np

    def softmax_bwd(y, dy):
        return _softmax_bwd_nb(np.ascontiguousarray(y), np.ascontiguousarray(dy))

else:
    im2col = im2col_np
    col2im = col2im_np
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    softmax_fwd = softmax_fwd_np
    softmax_bwd = softmax_bwd_np
