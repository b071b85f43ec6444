"""Forward/backward numeric kernels on plain numpy arrays.

Activations are NCHW, conv kernels are (F, C, kh, kw). Every backward
function is the exact adjoint of its forward's linearization; tests check
this with inner-product and finite-difference oracles.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import ConfigError, InputError, ShapeError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def check_dtypes(*arrays):
    dt = {a.dtype for a in arrays if a is not None}
    if len(dt) > 1:
        raise ShapeError(f"mixed dtypes in one operation: {sorted(map(str, dt))}")


def conv_output_size(size, k, stride, pad):
    """Output extent with floor semantics.

    Trailing rows that do not fit a whole stride are dropped, so a stride-2
    3x3 conv with pad 1 maps 32 -> 16.
    """
    if stride < 1 or pad < 0:
        raise ConfigError(f"invalid stride={stride} / pad={pad}")
    span = size + 2 * pad - k
    if span < 0:
        raise ConfigError(f"kernel {k} does not fit extent {size} with pad {pad}")
    return span // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


# patch-matrix budget per chunk (elements); keeps im2col output cache-resident
CHUNK_ELEMS = 1 << 17


def _chunk_size(n, rows, cols_per_image):
    return max(1, min(n, CHUNK_ELEMS // max(1, rows * cols_per_image)))


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of an NCHW batch with an (F, C, kh, kw) kernel.

    Computed as im2col + GEMM over chunks of images; the chunking is fixed
    by the shapes so results are deterministic.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"kernel in-channels {w.shape[1]} != input channels {x.shape[1]}")
    check_dtypes(x, w)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    w2 = w.reshape(f, -1)
    xp = _pad(x, pad)
    out = np.empty((n, f, ho, wo), dtype=x.dtype)
    step = _chunk_size(n, c * kh * kw, ho * wo)
    for s in range(0, n, step):
        xc = xp[s : s + step]
        cols = _accel.im2col(xc, kh, kw, stride, ho, wo)
        out[s : s + step] = (w2 @ cols).reshape(f, len(xc), ho, wo).transpose(1, 0, 2, 3)
    return out


def conv2d_backward(dy, x, w, stride=1, pad=0, need_dx=True):
    """Return ``(dx, dw)`` for :func:`conv2d`; ``dx`` is None if not needed.

    For stride 1 the input gradient is itself a convolution of ``dy`` with
    the flipped, channel-transposed kernel; strided convs scatter through
    col2im instead.
    """
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    if dy.shape != (n, f, ho, wo):
        raise ShapeError(f"upstream gradient {dy.shape} does not match conv output")
    w2 = w.reshape(f, -1)
    xp = _pad(x, pad)
    hp, wp = h + 2 * pad, wd + 2 * pad
    dw = np.zeros_like(w2)
    scatter = need_dx and not (stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw)
    dx = np.empty_like(x) if scatter else None
    step = _chunk_size(n, c * kh * kw, ho * wo)
    for s in range(0, n, step):
        xc = xp[s : s + step]
        m = len(xc)
        cols = _accel.im2col(xc, kh, kw, stride, ho, wo)
        dy2 = np.ascontiguousarray(dy[s : s + step].transpose(1, 0, 2, 3)).reshape(f, -1)
        dw += dy2 @ cols.T
        if scatter:
            dxp = _accel.col2im(w2.T @ dy2, m, c, hp, wp, kh, kw, stride, ho, wo)
            dx[s : s + step] = dxp[:, :, pad : pad + h, pad : pad + wd]
    if need_dx and not scatter:
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx = conv2d(dy, wt, 1, kh - 1 - pad)
    return dx, dw.reshape(w.shape)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BnState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels, dtype=DEFAULT_DTYPE, momentum=BN_MOMENTUM, eps=BN_EPS):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def copy(self):
        return BnState(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                       self.running_var.copy(), self.momentum, self.eps)


def batchnorm(x, state, mode="train", update_stats=True):
    """Per-channel batch normalization; returns ``(y, cache)``.

    In train mode the running statistics of ``state`` are updated in place
    unless ``update_stats`` is False.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm over {state.channels} channels got input {x.shape}")
    g = state.gamma.reshape(1, -1, 1, 1)
    b = state.beta.reshape(1, -1, 1, 1)
    if mode == "train":
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise ShapeError("train-mode batchnorm needs at least two values per channel")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(1, -1, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
        xhat = xc * inv_std.reshape(1, -1, 1, 1)
        if update_stats:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
        return xhat * g + b, ("train", xhat, inv_std, state.gamma)
    if mode == "eval":
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.dtype)
        xhat = (x - state.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        return xhat * g + b, ("eval", xhat, inv_std, state.gamma)
    raise ConfigError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(dy, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    mode, xhat, inv_std, gamma = cache
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std).reshape(1, -1, 1, 1)
    if mode == "eval":
        return dy * scale, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = scale * (dy - (dbeta / m).reshape(1, -1, 1, 1) - xhat * (dgamma / m).reshape(1, -1, 1, 1))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise / pooling / loss
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    # subgradient at exactly 0 is 0
    return dy * (x > 0)


def global_mean_pool(x):
    return x.mean(axis=(2, 3))


def global_mean_pool_backward(dy, shape):
    n, c, h, w = shape
    g = (dy / (h * w)).reshape(n, c, 1, 1)
    return np.broadcast_to(g, shape).copy()


def linear(x, w, b):
    """Fully connected layer with ``w`` shaped (out, in)."""
    return x @ w.T + b


def linear_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = e / s
    grad[rows, labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


# ---------------------------------------------------------------------------
# fused BN + ReLU (numba when available, numpy composition otherwise)
# ---------------------------------------------------------------------------

def bn_relu(x, state, mode="train", update_stats=True):
    """``relu(batchnorm(x))`` in one pass; returns ``(y, cache)``."""
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm over {state.channels} channels got input {x.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    if not _accel.USE_NUMBA:
        z, (_, xhat, inv_std, _) = batchnorm(x, state, mode, update_stats)
        return relu(z), (mode, xhat, inv_std, state.gamma, state.beta)
    x = np.ascontiguousarray(x)
    if mode == "train":
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise ShapeError("train-mode batchnorm needs at least two values per channel")
        y, xhat, mean, var, inv_std = _accel.bn_relu_train(x, state.gamma, state.beta, state.eps)
        if update_stats:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
    else:
        y, xhat, inv_std = _accel.bn_relu_eval(
            x, state.gamma, state.beta, state.running_mean, state.running_var, state.eps
        )
    return y, (mode, xhat, inv_std, state.gamma, state.beta)


def bn_relu_backward(dy, cache):
    """Return ``(dx, dgamma, dbeta)`` for :func:`bn_relu`."""
    mode, xhat, inv_std, gamma, beta = cache
    if _accel.USE_NUMBA:
        return _accel.bn_relu_backward(np.ascontiguousarray(dy), xhat, gamma, beta, inv_std, mode == "train")
    z = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return batchnorm_backward(relu_backward(dy, z), (mode, xhat, inv_std, gamma))
