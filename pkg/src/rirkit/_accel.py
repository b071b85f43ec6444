"""Hot kernels: im2col/col2im (numpy) and fused BN+ReLU (numba).

The fused kernels are used unless ``RIRKIT_DISABLE_NUMBA`` is set to a
truthy value or numba is not importable; :mod:`rirkit.tensor` then falls
back to composing ``batchnorm`` and ``relu`` in numpy. The two paths agree
to rounding (the numba kernels accumulate statistics in float64), and each
path is deterministic on its own.

im2col/col2im stay in numpy: a strided numpy copy already runs at memory
bandwidth and jitted loops measured slower (see benchmarks/).
"""
import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


HAVE_NUMBA = njit is not None
USE_NUMBA = HAVE_NUMBA and not _flag("RIRKIT_DISABLE_NUMBA")


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# patch matrices, channel-major: (C*kh*kw, N*ho*wo)
# ---------------------------------------------------------------------------

def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    # read-only (C, kh, kw, N, ho, wo) window view, then one copy
    win = as_strided(xp, (c, kh, kw, n, ho, wo), (sc, sh, sw, sn, sh * stride, sw * stride), writeable=False)
    return np.ascontiguousarray(win).reshape(c * kh * kw, n * ho * wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`; returns the gradient on the padded grid."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    blk = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blk[:, i, j].transpose(1, 0, 2, 3)
    return out


# ---------------------------------------------------------------------------
# fused batchnorm + relu
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    # reassociation lets the per-channel reductions vectorize; NaN/Inf semantics stay strict
    _REASSOC = {"reassoc"}

    @njit(cache=True, fastmath=_REASSOC)
    def bn_relu_train(x, gamma, beta, eps):
        """Returns (y, xhat, batch_mean, batch_var, inv_std)."""
        n, c = x.shape[0], x.shape[1]
        hw = x.shape[2] * x.shape[3]
        m = n * hw
        xf = x.reshape(n, c, hw)
        xhat = np.empty_like(xf)
        y = np.empty_like(xf)
        mean = np.empty(c, dtype=x.dtype)
        var = np.empty(c, dtype=x.dtype)
        inv = np.empty(c, dtype=x.dtype)
        for ch in range(c):
            s = 0.0
            for b in range(n):
                row = xf[b, ch]
                acc = 0.0
                for k in range(hw):
                    acc += row[k]
                s += acc
            mu = s / m
            q = 0.0
            for b in range(n):
                row = xf[b, ch]
                acc = 0.0
                for k in range(hw):
                    d = row[k] - mu
                    acc += d * d
                q += acc
            v = q / m
            mean[ch] = mu
            var[ch] = v
            inv[ch] = 1.0 / np.sqrt(v + eps)
            # cast the per-channel scalars to the array dtype before the hot loop
            muf, ivf, g, bb = mean[ch], inv[ch], gamma[ch], beta[ch]
            zero = g - g
            for b in range(n):
                row, xo, yo = xf[b, ch], xhat[b, ch], y[b, ch]
                for k in range(hw):
                    xh = (row[k] - muf) * ivf
                    xo[k] = xh
                    z = xh * g + bb
                    yo[k] = z if z > 0 else zero
        return y.reshape(x.shape), xhat.reshape(x.shape), mean, var, inv

    @njit(cache=True, fastmath=_REASSOC)
    def bn_relu_eval(x, gamma, beta, running_mean, running_var, eps):
        """Returns (y, xhat, inv_std)."""
        n, c = x.shape[0], x.shape[1]
        hw = x.shape[2] * x.shape[3]
        xf = x.reshape(n, c, hw)
        xhat = np.empty_like(xf)
        y = np.empty_like(xf)
        inv = np.empty(c, dtype=x.dtype)
        for ch in range(c):
            inv[ch] = 1.0 / np.sqrt(running_var[ch] + eps)
            muf, ivf, g, bb = running_mean[ch], inv[ch], gamma[ch], beta[ch]
            zero = g - g
            for b in range(n):
                row, xo, yo = xf[b, ch], xhat[b, ch], y[b, ch]
                for k in range(hw):
                    xh = (row[k] - muf) * ivf
                    xo[k] = xh
                    z = xh * g + bb
                    yo[k] = z if z > 0 else zero
        return y.reshape(x.shape), xhat.reshape(x.shape), inv

    @njit(cache=True, fastmath=_REASSOC)
    def bn_relu_backward(dy, xhat, gamma, beta, inv, train):
        """Returns (dx, dgamma, dbeta); the ReLU mask is rebuilt from xhat."""
        n, c = dy.shape[0], dy.shape[1]
        hw = dy.shape[2] * dy.shape[3]
        m = n * hw
        df = dy.reshape(n, c, hw)
        xf = xhat.reshape(n, c, hw)
        dx = np.empty_like(df)
        dgamma = np.empty(c, dtype=dy.dtype)
        dbeta = np.empty(c, dtype=dy.dtype)
        for ch in range(c):
            g, bb = gamma[ch], beta[ch]
            sb = 0.0
            sg = 0.0
            for b in range(n):
                drow, xrow = df[b, ch], xf[b, ch]
                ab = 0.0
                ag = 0.0
                for k in range(hw):
                    if xrow[k] * g + bb > 0:
                        ab += drow[k]
                        ag += drow[k] * xrow[k]
                sb += ab
                sg += ag
            dbeta[ch] = sb
            dgamma[ch] = sg
            scale = g * inv[ch]
            means = np.empty(2, dtype=dy.dtype)
            means[0] = sb / m
            means[1] = sg / m
            mbf, mgf = means[0], means[1]
            zero = g - g
            for b in range(n):
                drow, xrow, orow = df[b, ch], xf[b, ch], dx[b, ch]
                for k in range(hw):
                    d = drow[k] if xrow[k] * g + bb > 0 else zero
                    if train:
                        orow[k] = scale * (d - mbf - xrow[k] * mgf)
                    else:
                        orow[k] = scale * d
        return dx.reshape(dy.shape), dgamma, dbeta

else:  # pragma: no cover
    bn_relu_train = bn_relu_eval = bn_relu_backward = None
