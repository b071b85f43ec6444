"""Independent reference implementations used only by the tests.

These are deliberately naive (explicit loops, float64, no shared code with
the package) so that agreement with them is meaningful.
"""
import math

import numpy as np


def conv2d_loops(x, w, stride, pad):
    """Direct six-nested-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                iy, ix = yy * stride + i - pad, xx * stride + j - pad
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[b, ci, iy, ix]) * float(w[o, ci, i, j])
                    out[b, o, yy, xx] = acc
    return out


def mean_pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            out[b, ch] = sum(float(x[b, ch, i, j]) for i in range(h) for j in range(w)) / (h * w)
    return out


def ema_scalar(values, momentum, start):
    r = start
    for v in values:
        r = (1 - momentum) * r + momentum * v
    return r


def cross_entropy_direct(logits, labels):
    """Mean -log softmax via the textbook formula in float64 (fine for moderate logits)."""
    total = 0.0
    grad = np.zeros(logits.shape)
    n = len(labels)
    for i, row in enumerate(np.asarray(logits, dtype=np.float64)):
        e = [math.exp(v) for v in row]
        s = sum(e)
        total += -math.log(e[labels[i]] / s)
        for k in range(len(row)):
            grad[i, k] = (e[k] / s - (1.0 if k == labels[i] else 0.0)) / n
    return total / n, grad


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))
