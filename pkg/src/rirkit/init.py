"""Initializers and the ResNet-Init fuse/split algebra.

A generalized residual layer has four kernels (r->r, t->r, r->t, t->t).
Fusing lays them out as one block matrix over the concatenated (r || t)
channels and adds a partial identity that copies the residual stream:

    [[W_rr, W_tr],      [[I, 0],
     [W_rt, W_tt]]  +    [0, 0]]

For conv kernels the block structure lives on the (filter, in-channel)
axes and the identity sits at the centre tap.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import DEFAULT_DTYPE


@dataclass(frozen=True)
class StreamSplit:
    n_r: int
    n_t: int

    def __post_init__(self):
        if self.n_r < 1 or self.n_t < 1:
            raise ConfigError(f"stream sizes must be >= 1, got {self.n_r}/{self.n_t}")

    @classmethod
    def even(cls, channels):
        if channels % 2:
            raise ConfigError(f"cannot split {channels} channels into equal streams")
        return cls(channels // 2, channels // 2)

    @property
    def total(self):
        return self.n_r + self.n_t


def fans(shape):
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    raise ShapeError(f"initializers take rank-2 or rank-4 shapes, got {shape}")


def xavier_init(shape, rng, dtype=DEFAULT_DTYPE):
    fan_in, fan_out = fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def msr_init(shape, rng, dtype=DEFAULT_DTYPE):
    fan_in, _ = fans(shape)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def orthogonal_init(shape, rng, dtype=DEFAULT_DTYPE):
    """Gain-1 orthogonal init; rank-4 kernels are flattened to (F, C*kh*kw)."""
    fans(shape)
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    # sign fix makes the draw uniform over the orthogonal group
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q.reshape(shape).astype(dtype)


INITIALIZERS = {"xavier": xavier_init, "msr": msr_init, "orthogonal": orthogonal_init}


def get_initializer(name):
    try:
        return INITIALIZERS[name]
    except KeyError:
        raise ConfigError(f"unknown initializer {name!r}; choose from {sorted(INITIALIZERS)}") from None


# ---------------------------------------------------------------------------
# partial identity
# ---------------------------------------------------------------------------

def partial_identity(split, kind="conv", k=3, dtype=DEFAULT_DTYPE):
    n = split.total
    if kind == "fc":
        out = np.zeros((n, n), dtype)
        idx = np.arange(split.n_r)
        out[idx, idx] = 1
        return out
    if kind == "conv":
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"partial identity kernel needs an odd size, got k={k}")
        out = np.zeros((n, n, k, k), dtype)
        idx = np.arange(split.n_r)
        out[idx, idx, k // 2, k // 2] = 1
        return out
    raise ConfigError(f"kind must be 'fc' or 'conv', got {kind!r}")


def identity_positions(split, k):
    """Flat indices of the ones in ``partial_identity(split, 'conv', k)``.

    This is the sparse mask form stored alongside fused kernels.
    """
    n, c = split.total, k // 2
    idx = np.arange(split.n_r)
    return np.ravel_multi_index((idx, idx, np.full_like(idx, c), np.full_like(idx, c)), (n, n, k, k))


# ---------------------------------------------------------------------------
# fuse / split
# ---------------------------------------------------------------------------

def _check_blocks(w_rr, w_tr, w_rt, w_tt, kind):
    rank = 2 if kind == "fc" else 4
    for name, w in (("W_rr", w_rr), ("W_tr", w_tr), ("W_rt", w_rt), ("W_tt", w_tt)):
        if w.ndim != rank:
            raise ShapeError(f"{name} has rank {w.ndim}, expected {rank} for kind={kind!r}")
    n_r_out, n_r_in = w_rr.shape[:2]
    n_t_out, n_t_in = w_tt.shape[:2]
    taps = w_rr.shape[2:]
    expect = {
        "W_tr": (n_r_out, n_t_in),
        "W_rt": (n_t_out, n_r_in),
    }
    for name, w in (("W_tr", w_tr), ("W_rt", w_rt)):
        if w.shape[:2] != expect[name] or w.shape[2:] != taps:
            raise ShapeError(f"{name} shape {w.shape} incompatible with W_rr {w_rr.shape} / W_tt {w_tt.shape}")
    if w_tt.shape[2:] != taps:
        raise ShapeError(f"W_tt taps {w_tt.shape[2:]} differ from W_rr taps {taps}")
    return StreamSplit(n_r_out, n_t_out), StreamSplit(n_r_in, n_t_in)


def resnet_init_fuse(w_rr, w_tr, w_rt, w_tt, split, kind="conv", identity=True):
    """Compose four stream kernels into one ResNet-Init weight tensor.

    ``split`` is the output split. Input stream sizes are read off the
    blocks, so dimension-changing layers can be fused with
    ``identity=False``.
    """
    out_split, in_split = _check_blocks(w_rr, w_tr, w_rt, w_tt, kind)
    if out_split != split:
        raise ShapeError(f"blocks describe output split {out_split}, expected {split}")
    fused = np.concatenate(
        [np.concatenate([w_rr, w_tr], axis=1), np.concatenate([w_rt, w_tt], axis=1)], axis=0
    )
    if identity:
        if in_split != split:
            raise ShapeError("identity can only be embedded when input and output splits match")
        k = w_rr.shape[2] if kind == "conv" else 1
        fused += partial_identity(split, kind, k, dtype=fused.dtype)
    return fused


def resnet_init_split(w, split, kind="conv", in_split=None, identity=True):
    """Inverse of :func:`resnet_init_fuse`: returns (W_rr, W_tr, W_rt, W_tt)."""
    in_split = split if in_split is None else in_split
    rank = 2 if kind == "fc" else 4
    if w.ndim != rank or w.shape[0] != split.total or w.shape[1] != in_split.total:
        raise ShapeError(f"fused tensor {w.shape} does not match split {split} / {in_split}")
    if identity:
        if in_split != split:
            raise ShapeError("identity can only be removed when input and output splits match")
        k = w.shape[2] if kind == "conv" else 1
        if kind == "conv" and k % 2 == 0:
            raise ConfigError(f"fused kernel with identity must have odd taps, got {k}")
        w = w - partial_identity(split, kind, k, dtype=w.dtype)
    else:
        w = w.copy()
    r_o, r_i = split.n_r, in_split.n_r
    return w[:r_o, :r_i].copy(), w[:r_o, r_i:].copy(), w[r_o:, :r_i].copy(), w[r_o:, r_i:].copy()
