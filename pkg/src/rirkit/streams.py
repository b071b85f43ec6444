"""Generalized residual blocks in unfused and fused (ResNet Init) form.

Every layer here computes ``sigma(linear(x) + skip)`` where sigma is batch
normalization followed by ReLU and ``skip`` is an optional block-level
shortcut. Layers take and return the concatenated (r || t) tensor; the
residual stream is always the first ``n_r`` channels.
"""
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .init import StreamSplit, identity_positions, partial_identity, resnet_init_fuse, resnet_init_split
from .tensor import (
    BnState,
    bn_relu,
    bn_relu_backward,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
)

SHORTCUT_MODES = ("identity", "pad", "projection")


@dataclass
class StreamPair:
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        rs, ts = self.r.shape, self.t.shape
        if rs[0] != ts[0] or rs[2:] != ts[2:]:
            raise ShapeError(f"streams disagree on batch/spatial shape: {rs} vs {ts}")

    @classmethod
    def from_tensor(cls, x, split):
        if x.shape[1] != split.total:
            raise ShapeError(f"tensor has {x.shape[1]} channels, split expects {split.total}")
        return cls(x[:, : split.n_r], x[:, split.n_r :])

    def concat(self):
        return np.concatenate([self.r, self.t], axis=1)


@dataclass
class PlainLayerParams:
    """A standard conv layer (CNN / ResNet)."""

    weight: np.ndarray
    bn: BnState | None
    stride: int = 1


@dataclass
class GeneralizedBlockParams:
    """Four-kernel generalized residual layer with an explicit r shortcut."""

    w_rr: np.ndarray
    w_tr: np.ndarray
    w_rt: np.ndarray
    w_tt: np.ndarray
    bn: BnState | None
    stride: int = 1
    shortcut_mode: str = "identity"
    proj: np.ndarray | None = None

    def __post_init__(self):
        _check_shortcut(self.shortcut_mode, self.proj)
        resnet_init_fuse(self.w_rr, self.w_tr, self.w_rt, self.w_tt, self.split, identity=False)

    @property
    def split(self):
        return StreamSplit(self.w_rr.shape[0], self.w_tt.shape[0])

    @property
    def in_split(self):
        return StreamSplit(self.w_rr.shape[1], self.w_tt.shape[1])


@dataclass
class FusedLayerParams:
    """A generalized residual layer realized as one conv (ResNet Init).

    With ``shortcut_mode == "identity"`` the residual shortcut is embedded
    in ``weight`` as a partial identity. Otherwise the kernel holds only the
    learned blocks and the shortcut is computed explicitly.
    """

    weight: np.ndarray
    split: StreamSplit
    in_split: StreamSplit
    bn: BnState | None
    stride: int = 1
    shortcut_mode: str = "identity"
    proj: np.ndarray | None = None

    def __post_init__(self):
        _check_shortcut(self.shortcut_mode, self.proj)
        if self.weight.shape[:2] != (self.split.total, self.in_split.total):
            raise ShapeError(f"fused kernel {self.weight.shape} does not match splits {self.split}/{self.in_split}")
        if self.shortcut_mode == "identity" and (self.split != self.in_split or self.stride != 1):
            raise ConfigError("embedded identity requires equal splits and stride 1")

    @property
    def identity_mask(self):
        if self.shortcut_mode != "identity":
            return None
        return identity_positions(self.split, self.weight.shape[2])


def _check_shortcut(mode, proj):
    if mode not in SHORTCUT_MODES:
        raise ConfigError(f"shortcut mode must be one of {SHORTCUT_MODES}, got {mode!r}")
    if (mode == "projection") != (proj is not None):
        raise ConfigError("a projection kernel is required exactly when shortcut_mode == 'projection'")


def fuse_block(p, bn=None):
    """FusedLayerParams equivalent to a GeneralizedBlockParams."""
    embed = p.shortcut_mode == "identity"
    w = resnet_init_fuse(p.w_rr, p.w_tr, p.w_rt, p.w_tt, p.split, identity=embed)
    return FusedLayerParams(w, p.split, p.in_split, p.bn if bn is None else bn, p.stride, p.shortcut_mode, p.proj)


def unfuse_layer(p):
    blocks = resnet_init_split(p.weight, p.split, in_split=p.in_split, identity=p.shortcut_mode == "identity")
    return GeneralizedBlockParams(*blocks, bn=p.bn, stride=p.stride, shortcut_mode=p.shortcut_mode, proj=p.proj)


# ---------------------------------------------------------------------------
# shortcut
# ---------------------------------------------------------------------------

def shortcut(r, out_channels, stride=1, mode="identity", proj=None):
    c = r.shape[1]
    if mode == "identity":
        if c != out_channels or stride != 1:
            raise ConfigError(f"identity shortcut cannot map {c} channels/stride {stride} to {out_channels}")
        return r
    if mode == "pad":
        if out_channels < c:
            raise ConfigError(f"pad shortcut cannot shrink {c} channels to {out_channels}")
        sub = r[:, :, ::stride, ::stride]
        out = np.zeros((r.shape[0], out_channels) + sub.shape[2:], dtype=r.dtype)
        out[:, :c] = sub
        return out
    if mode == "projection":
        if proj is None or proj.shape[0] != out_channels:
            raise ConfigError("projection shortcut needs a kernel with out_channels filters")
        return conv2d(r, proj, stride, proj.shape[2] // 2)
    raise ConfigError(f"unknown shortcut mode {mode!r}")


def shortcut_backward(dy, r, stride=1, mode="identity", proj=None):
    """Return ``(dr, dproj)``."""
    if mode == "identity":
        return dy, None
    if mode == "pad":
        dr = np.zeros_like(r)
        dr[:, :, ::stride, ::stride] = dy[:, : r.shape[1]]
        return dr, None
    dr, dproj = conv2d_backward(dy, r, proj, stride, proj.shape[2] // 2)
    return dr, dproj


# ---------------------------------------------------------------------------
# sigma = BN then ReLU
# ---------------------------------------------------------------------------

def sigma(pre, bn, mode, update_stats=True):
    if bn is None:
        return relu(pre), (None, pre)
    y, cache = bn_relu(pre, bn, mode, update_stats)
    return y, (cache, None)


def sigma_backward(dy, cache):
    bn_cache, pre = cache
    if bn_cache is None:
        return relu_backward(dy, pre), None, None
    return bn_relu_backward(dy, bn_cache)


# ---------------------------------------------------------------------------
# layer linear parts
# ---------------------------------------------------------------------------

def _pad_of(w):
    return w.shape[2] // 2


def _linear(p, x):
    if isinstance(p, PlainLayerParams):
        return conv2d(x, p.weight, p.stride, _pad_of(p.weight))
    if isinstance(p, FusedLayerParams):
        pre = conv2d(x, p.weight, p.stride, _pad_of(p.weight))
        if p.shortcut_mode != "identity":
            pre[:, : p.split.n_r] += shortcut(x[:, : p.in_split.n_r], p.split.n_r, p.stride, p.shortcut_mode, p.proj)
        return pre
    if isinstance(p, GeneralizedBlockParams):
        n_r = p.in_split.n_r
        r, t = x[:, :n_r], x[:, n_r:]
        s, pad = p.stride, _pad_of(p.w_rr)
        pre_r = conv2d(r, p.w_rr, s, pad) + conv2d(t, p.w_tr, s, pad)
        pre_r += shortcut(r, p.split.n_r, s, p.shortcut_mode, p.proj)
        pre_t = conv2d(r, p.w_rt, s, pad) + conv2d(t, p.w_tt, s, pad)
        return np.concatenate([pre_r, pre_t], axis=1)
    raise TypeError(f"not a layer parameter object: {type(p).__name__}")


def _linear_backward(p, dpre, x, need_dx=True):
    grads = {}
    if isinstance(p, PlainLayerParams):
        dx, grads["weight"] = conv2d_backward(dpre, x, p.weight, p.stride, _pad_of(p.weight), need_dx)
        return dx, grads
    if isinstance(p, FusedLayerParams):
        dx, grads["weight"] = conv2d_backward(dpre, x, p.weight, p.stride, _pad_of(p.weight), need_dx)
        if p.shortcut_mode != "identity":
            n_r = p.in_split.n_r
            dr, dproj = shortcut_backward(
                np.ascontiguousarray(dpre[:, : p.split.n_r]), x[:, :n_r], p.stride, p.shortcut_mode, p.proj
            )
            if need_dx:
                dx[:, :n_r] += dr
            if dproj is not None:
                grads["proj"] = dproj
        return dx, grads
    n_r = p.in_split.n_r
    r, t = x[:, :n_r], x[:, n_r:]
    s, pad = p.stride, _pad_of(p.w_rr)
    dpr = np.ascontiguousarray(dpre[:, : p.split.n_r])
    dpt = np.ascontiguousarray(dpre[:, p.split.n_r :])
    dr1, grads["w_rr"] = conv2d_backward(dpr, r, p.w_rr, s, pad, need_dx)
    dt1, grads["w_tr"] = conv2d_backward(dpr, t, p.w_tr, s, pad, need_dx)
    dr2, grads["w_rt"] = conv2d_backward(dpt, r, p.w_rt, s, pad, need_dx)
    dt2, grads["w_tt"] = conv2d_backward(dpt, t, p.w_tt, s, pad, need_dx)
    dr3, dproj = shortcut_backward(dpr, r, s, p.shortcut_mode, p.proj)
    if dproj is not None:
        grads["proj"] = dproj
    if not need_dx:
        return None, grads
    return np.concatenate([dr1 + dr2 + dr3, dt1 + dt2], axis=1), grads


def layer_forward(p, x, mode="train", skip=None, update_stats=True):
    """``sigma(linear(x) + skip)``; returns ``(y, cache)``."""
    pre = _linear(p, x)
    if skip is not None:
        pre = pre + skip
    y, sc = sigma(pre, p.bn, mode, update_stats)
    return y, (x, sc)


def layer_backward(p, dy, cache, need_dx=True):
    """Return ``(dx, grads, dpre)``; ``dpre`` is also the gradient of ``skip``."""
    x, sc = cache
    dpre, dgamma, dbeta = sigma_backward(dy, sc)
    dx, grads = _linear_backward(p, dpre, x, need_dx)
    if dgamma is not None:
        grads["gamma"], grads["beta"] = dgamma, dbeta
    return dx, grads, dpre


# ---------------------------------------------------------------------------
# public block-level API
# ---------------------------------------------------------------------------

def grb_forward_unfused(pair, p, mode="train", update_stats=True):
    """Generalized residual layer computed as four separate convolutions."""
    if pair.r.shape[1] != p.in_split.n_r or pair.t.shape[1] != p.in_split.n_t:
        raise ShapeError(f"stream pair channels ({pair.r.shape[1]}, {pair.t.shape[1]}) != {p.in_split}")
    y, _ = layer_forward(p, pair.concat(), mode, update_stats=update_stats)
    return StreamPair.from_tensor(y, p.split)


def grb_forward_fused(x, p, split=None, mode="train", update_stats=True):
    split = p.in_split if split is None else split
    if x.shape[1] != split.total:
        raise ShapeError(f"input has {x.shape[1]} channels, split expects {split.total}")
    y, _ = layer_forward(p, x, mode, update_stats=update_stats)
    return y


def block_forward(x, layers, shortcut_mode=None, proj=None, mode="train", update_stats=True):
    """Chain ``layers``; a block-level shortcut from ``x`` joins the last one.

    ``shortcut_mode=None`` means no block shortcut (CNN / ResNet Init).
    Returns ``(y, cache)``.
    """
    skip = None
    if shortcut_mode is not None:
        out_ch = _out_channels(layers[-1])
        stride = int(np.prod([lp.stride for lp in layers]))
        skip = shortcut(x, out_ch, stride, shortcut_mode, proj)
    caches = []
    h = x
    for i, lp in enumerate(layers):
        h, c = layer_forward(lp, h, mode, skip if i == len(layers) - 1 else None, update_stats)
        caches.append(c)
    return h, (x, caches, shortcut_mode, proj)


def block_backward(layers, dy, cache, need_dx=True):
    """Return ``(dx, [grads per layer], dproj)``."""
    x, caches, shortcut_mode, proj = cache
    grads = [None] * len(layers)
    d = dy
    dskip = None
    for i in range(len(layers) - 1, -1, -1):
        nd = need_dx or i > 0
        d, grads[i], dpre = layer_backward(layers[i], d, caches[i], nd)
        if i == len(layers) - 1:
            dskip = dpre
    dproj = None
    if shortcut_mode is not None:
        stride = int(np.prod([lp.stride for lp in layers]))
        ds, dproj = shortcut_backward(dskip, x, stride, shortcut_mode, proj)
        if need_dx:
            d = d + ds
    return d, grads, dproj


def _out_channels(p):
    if isinstance(p, GeneralizedBlockParams):
        return p.split.total
    return p.weight.shape[0]


def two_layer_block(x, layer1, layer2, kind="resnet", mode="train", shortcut_mode="identity", proj=None):
    """2-layer ResNet block (plain layers) or RiR block (generalized layers).

    Both kinds share the outer structure
    ``sigma(linear2(sigma(linear1(x))) + shortcut(x))``.
    """
    generalized = (FusedLayerParams, GeneralizedBlockParams)
    if kind == "resnet":
        if not all(isinstance(p, PlainLayerParams) for p in (layer1, layer2)):
            raise ConfigError("a ResNet block takes plain conv layers")
    elif kind == "rir":
        if not all(isinstance(p, generalized) for p in (layer1, layer2)):
            raise ConfigError("an RiR block takes generalized residual layers")
    else:
        raise ConfigError(f"kind must be 'resnet' or 'rir', got {kind!r}")
    y, _ = block_forward(x, [layer1, layer2], shortcut_mode, proj, mode)
    return y


def build_embedded_resnet_block(conv1, conv2, split, bn1=None, bn2=None):
    """Two generalized layers that together form a plain 2-layer ResNet block.

    Layer 1 routes r -> t through ``conv1`` and keeps r on its shortcut;
    layer 2 routes t -> r through ``conv2``. All other connections are 0.
    """
    if conv1.shape[:2] != (split.n_t, split.n_r) or conv2.shape[:2] != (split.n_r, split.n_t):
        raise ConfigError(
            f"conv1 must map n_r={split.n_r} -> n_t={split.n_t} and conv2 the reverse; "
            f"got {conv1.shape} and {conv2.shape}"
        )
    if conv1.shape[2:] != conv2.shape[2:]:
        raise ConfigError("conv1 and conv2 must have the same kernel size")
    k = conv1.shape[2:]
    z = lambda o, i: np.zeros((o, i) + k, dtype=conv1.dtype)  # noqa: E731
    nr, nt = split.n_r, split.n_t
    l1 = GeneralizedBlockParams(z(nr, nr), z(nr, nt), conv1.copy(), z(nt, nt), bn=bn1)
    l2 = GeneralizedBlockParams(z(nr, nr), conv2.copy(), z(nt, nr), z(nt, nt), bn=bn2)
    return l1, l2


def stream_slices(p):
    """(rows, cols) slices of the learned r and t blocks in a fused kernel."""
    so, si = p.split, p.in_split
    r_out, t_out = slice(0, so.n_r), slice(so.n_r, so.total)
    r_in, t_in = slice(0, si.n_r), slice(si.n_r, si.total)
    return {"residual": ((r_out, r_in), (t_out, r_in)), "transient": ((r_out, t_in), (t_out, t_in))}


def ablate(p, stream):
    """Copy of fused layer ``p`` with all learned outgoing weights of ``stream`` zeroed.

    The residual stream's identity shortcut is not learned and is kept.
    """
    if stream not in ("residual", "transient"):
        raise ConfigError(f"stream must be 'residual' or 'transient', got {stream!r}")
    if not isinstance(p, FusedLayerParams):
        raise ConfigError("ablation applies to fused ResNet-Init layers")
    w = p.weight.copy()
    for rows, cols in stream_slices(p)[stream]:
        w[rows, cols] = 0
    if p.shortcut_mode == "identity":
        pi = partial_identity(p.split, "conv", w.shape[2], dtype=w.dtype)
        # the r->r block holds W_rr + I; restore the identity exactly
        nr = p.split.n_r
        if stream == "residual":
            w[:nr, :nr] = pi[:nr, :nr]
    return replace(p, weight=w)


def ablate_layer(layers, stream, layer_index):
    """Ablate one fused layer in a list, returning a new list."""
    if not 0 <= layer_index < len(layers):
        raise IndexError(f"layer index {layer_index} out of range for {len(layers)} fused layers")
    out = list(layers)
    out[layer_index] = ablate(layers[layer_index], stream)
    return out
