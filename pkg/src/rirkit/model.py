"""Network assembly for CNN, ResNet, ResNet Init and RiR.

All four kinds share one layout: a stem conv, stages of blocks of conv
layers, then a classifier head. They differ in two switches:

    kind          generalized layers   block shortcuts
    CNN           no                   no
    ResNet        no                   yes
    ResNet Init   yes                  no
    RiR           yes                  yes

Generalized layers are normally fused (one kernel per layer). Building
with ``fused=False`` gives the four-kernel twin that shares the exact
same random draws, which is what the equivalence checks compare against.
"""
import contextlib
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .init import StreamSplit, get_initializer, identity_positions, resnet_init_fuse
from .streams import (
    FusedLayerParams,
    GeneralizedBlockParams,
    PlainLayerParams,
    ablate,
    block_backward,
    block_forward,
    fuse_block,
    layer_backward,
    layer_forward,
)
from .tensor import (
    DEFAULT_DTYPE,
    BnState,
    conv2d,
    conv2d_backward,
    global_mean_pool,
    global_mean_pool_backward,
    linear,
    linear_backward,
    softmax_cross_entropy,
)


class ModelKind(str, Enum):
    CNN = "cnn"
    RESNET = "resnet"
    RESNET_INIT = "resnet-init"
    RIR = "rir"

    @property
    def generalized(self):
        return self in (ModelKind.RESNET_INIT, ModelKind.RIR)

    @property
    def block_shortcuts(self):
        return self in (ModelKind.RESNET, ModelKind.RIR)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            raise ConfigError(f"unknown model kind {value!r}; choose from {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    layers_per_block: int
    filters: int
    first_stride: int = 1


@dataclass(frozen=True)
class NetSpec:
    name: str
    stem_filters: int
    stages: tuple
    head: str = "fc"  # "fc" (pool then FC) or "conv1x1" (1x1 conv then pool)
    num_classes: int = 10
    kernel: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a network needs at least one stage")
        prev = self.stem_filters
        for st in self.stages:
            if st.blocks < 1 or st.layers_per_block < 1:
                raise ConfigError(f"stage {st} needs >= 1 block and >= 1 layer per block")
            if st.filters < prev:
                raise ConfigError("filters per stage must be non-decreasing")
            if st.first_stride < 1:
                raise ConfigError("stride must be positive")
            prev = st.filters
        if self.head not in ("fc", "conv1x1"):
            raise ConfigError(f"head must be 'fc' or 'conv1x1', got {self.head!r}")
        if self.kernel % 2 == 0:
            raise ConfigError("conv kernel size must be odd")

    def with_classes(self, k):
        return NetSpec(self.name, self.stem_filters, self.stages, self.head, k, self.kernel)


def _three_stage(name, base, blocks, layers, head="fc"):
    return NetSpec(
        name,
        base,
        (
            StageSpec(blocks, layers, base, 1),
            StageSpec(blocks, layers, 2 * base, 2),
            StageSpec(blocks, layers, 4 * base, 2),
        ),
        head,
    )


BASELINE32 = _three_stage("baseline32", 16, 5, 2)
WIDE18 = NetSpec(
    "wide18",
    96,
    (StageSpec(2, 2, 96, 1), StageSpec(3, 2, 192, 2), StageSpec(3, 2, 384, 2)),
    head="conv1x1",
)
TINY = _three_stage("tiny", 16, 2, 2)

_DESK = re.compile(r"^desk-b(\d+)-l(\d+)-f(\d+)$")


def desk_spec(blocks, layers_per_block, filters_per_stream=8):
    """Desk-scale 3-stage family; ``blocks`` is per stage."""
    return _three_stage(
        f"desk-b{blocks}-l{layers_per_block}-f{filters_per_stream}", 2 * filters_per_stream, blocks, layers_per_block
    )


def standard_specs():
    specs = {s.name: s for s in (BASELINE32, WIDE18, TINY)}
    for b in (1, 2, 3):
        for layers in range(2, 11):
            for f in (8, 16):
                s = desk_spec(b, layers, f)
                specs[s.name] = s
    return specs


def get_spec(name, num_classes=10):
    m = _DESK.match(name)
    if m:
        spec = desk_spec(*map(int, m.groups()))
    else:
        specs = standard_specs()
        if name not in specs:
            raise KeyError(f"unknown architecture {name!r}; known: baseline32, wide18, tiny, desk-b<B>-l<L>-f<F>")
        spec = specs[name]
    return spec if num_classes == 10 else spec.with_classes(num_classes)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Block:
    layers: list
    names: list  # per layer: {grad key -> parameter name}
    shortcut_mode: str | None = None
    proj_name: str | None = None


@dataclass
class Model:
    spec: NetSpec
    kind: ModelKind
    fused: bool
    dtype: np.dtype
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)  # kernel name -> (n_r, k)
    stem: PlainLayerParams | None = None
    stem_names: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)

    # -- registry helpers -------------------------------------------------

    def _add(self, name, arr):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = arr
        return arr

    def _bn(self, prefix, channels, names):
        bn = BnState.create(channels, self.dtype)
        names["gamma"] = f"{prefix}.bn.gamma"
        names["beta"] = f"{prefix}.bn.beta"
        self._add(names["gamma"], bn.gamma)
        self._add(names["beta"], bn.beta)
        self.buffers[f"{prefix}.bn.running_mean"] = bn.running_mean
        self.buffers[f"{prefix}.bn.running_var"] = bn.running_var
        return bn

    def bn_states(self):
        out = [self.stem.bn]
        for b in self.blocks:
            out.extend(lp.bn for lp in b.layers)
        return out

    def identity_mask(self, name):
        """Sparse flat positions of the partial identity inside a fused kernel."""
        if name not in self.masks:
            return None
        n_r, k = self.masks[name]
        return identity_positions(StreamSplit(n_r, self.params[name].shape[0] - n_r), k)

    def fused_layers(self):
        """(block index, layer index) of every fused layer, in forward order."""
        return [
            (bi, li)
            for bi, b in enumerate(self.blocks)
            for li, lp in enumerate(b.layers)
            if isinstance(lp, FusedLayerParams)
        ]

    def identity_masks(self):
        """name -> sparse identity positions, for identity-centred decay."""
        return {name: self.identity_mask(name) for name in self.masks}

    def fused_view(self):
        """Parameters in fused layout: unfused layers are fused on the fly.

        Lets a fused model and its unfused twin be compared name by name.
        """
        out = {}
        for b in self.blocks:
            for lp, names in zip(b.layers, b.names):
                if isinstance(lp, GeneralizedBlockParams):
                    prefix = names["w_rr"].rsplit(".", 1)[0]
                    out[f"{prefix}.weight"] = fuse_block(lp).weight
        for name, arr in self.params.items():
            if not re.search(r"\.w_(rr|tr|rt|tt)$", name):
                out[name] = arr
        return out

    def load_state(self, tensors, strict=True):
        """Copy named arrays into parameters and buffers in place."""
        targets = {**self.params, **self.buffers}
        missing = set(targets) - set(tensors)
        if strict and missing:
            raise ConfigError(f"state is missing {sorted(missing)[:5]}")
        for name, arr in tensors.items():
            if name not in targets:
                if strict:
                    raise ConfigError(f"unexpected tensor {name!r}")
                continue
            dst = targets[name]
            if dst.shape != tuple(arr.shape):
                raise ShapeError(f"{name}: expected shape {dst.shape}, got {tuple(arr.shape)}")
            dst[...] = arr

    def state(self):
        """All parameters then all buffers, in registration order."""
        return {**self.params, **self.buffers}

    @property
    def head_weight(self):
        return self.params["head.weight"]

    @property
    def head_bias(self):
        return self.params["head.bias"]

    # -- compute ----------------------------------------------------------

    def forward(self, x, mode="eval", update_stats=True):
        logits, _ = self._forward(x, mode, update_stats)
        return logits

    def _forward(self, x, mode, update_stats):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"model expects [N,3,H,W] input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        h, stem_cache = layer_forward(self.stem, x, mode, update_stats=update_stats)
        caches = []
        for b in self.blocks:
            proj = self.params[b.proj_name] if b.proj_name else None
            h, c = block_forward(h, b.layers, b.shortcut_mode, proj, mode, update_stats)
            caches.append(c)
        w, bias = self.head_weight, self.head_bias
        if self.spec.head == "fc":
            pooled = global_mean_pool(h)
            logits = linear(pooled, w, bias)
            head_cache = (h, pooled)
        else:
            z = conv2d(h, w, 1, 0) + bias.reshape(1, -1, 1, 1)
            logits = global_mean_pool(z)
            head_cache = (h, z)
        return logits, (stem_cache, caches, head_cache)

    def loss_and_grads(self, x, labels, mode="train", update_stats=True, return_logits=False):
        """Mean cross-entropy and gradients for every registered parameter."""
        logits, (stem_cache, caches, head_cache) = self._forward(x, mode, update_stats)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        grads = {}
        h, aux = head_cache
        w = self.head_weight
        if self.spec.head == "fc":
            dpooled, grads["head.weight"], grads["head.bias"] = linear_backward(dlogits, aux, w)
            dh = global_mean_pool_backward(dpooled, h.shape)
        else:
            dz = global_mean_pool_backward(dlogits, aux.shape)
            grads["head.bias"] = dz.sum(axis=(0, 2, 3))
            dh, grads["head.weight"] = conv2d_backward(dz, h, w, 1, 0)
        for b, c in zip(reversed(self.blocks), reversed(caches)):
            dh, layer_grads, dproj = block_backward(b.layers, dh, c)
            for names, lg in zip(b.names, layer_grads):
                for key, g in lg.items():
                    grads[names[key]] = g
            if dproj is not None:
                grads[b.proj_name] = dproj
        _, stem_grads, _ = layer_backward(self.stem, dh, stem_cache, need_dx=False)
        for key, g in stem_grads.items():
            grads[self.stem_names[key]] = g
        grads = {name: grads[name] for name in self.params}
        if return_logits:
            return loss, grads, logits
        return loss, grads

    def predict(self, x, batch_size=250):
        out = [self.forward(x[i : i + batch_size], "eval") for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def accuracy(self, x, labels, batch_size=250):
        if len(x) == 0:
            return 0.0
        pred = self.predict(x, batch_size).argmax(axis=1)
        return float((pred == np.asarray(labels)).mean())

    # -- ablation ---------------------------------------------------------

    @contextlib.contextmanager
    def ablated(self, stream, layer_index):
        """Temporarily ablate ``stream`` at the ``layer_index``-th fused layer."""
        fl = self.fused_layers()
        if not 0 <= layer_index < len(fl):
            raise IndexError(f"fused layer index {layer_index} out of range (model has {len(fl)})")
        bi, li = fl[layer_index]
        p = self.blocks[bi].layers[li]
        saved = p.weight.copy()
        p.weight[...] = ablate(p, stream).weight
        try:
            yield self
        finally:
            p.weight[...] = saved


def forward(model, batch, mode="eval"):
    return model.forward(batch, mode)


def backward(model, batch, labels, mode="train"):
    return model.loss_and_grads(batch, labels, mode)


def count_params(model):
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_network(spec, kind, init="msr", rng=0, fused=True, dtype=DEFAULT_DTYPE):
    """Materialize a network.

    Random draws happen in a fixed order and generalized layers draw their
    four sub-blocks before fusing, so ``fused=True`` and ``fused=False``
    with the same seed give equivalent networks.
    """
    if isinstance(spec, str):
        spec = get_spec(spec)
    kind = ModelKind.parse(kind)
    init_fn = get_initializer(init)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    dtype = np.dtype(dtype)
    model = Model(spec, kind, fused, dtype)
    k = spec.kernel

    draw = lambda shape: init_fn(shape, rng, dtype)  # noqa: E731

    w = model._add("stem.weight", draw((spec.stem_filters, 3, k, k)))
    model.stem_names = {"weight": "stem.weight"}
    model.stem = PlainLayerParams(w, model._bn("stem", spec.stem_filters, model.stem_names), 1)

    c_in = spec.stem_filters
    for si, st in enumerate(spec.stages):
        for bi in range(st.blocks):
            block_in = c_in
            block_stride = st.first_stride if bi == 0 else 1
            layers, names = [], []
            for li in range(st.layers_per_block):
                prefix = f"s{si}.b{bi}.l{li}"
                stride = block_stride if li == 0 else 1
                lp, nm = _make_layer(model, prefix, c_in, st.filters, stride, k, draw)
                layers.append(lp)
                names.append(nm)
                c_in = st.filters
            block = Block(layers, names)
            if kind.block_shortcuts:
                if block_in == st.filters and block_stride == 1:
                    block.shortcut_mode = "identity"
                else:
                    block.shortcut_mode = "projection"
                    block.proj_name = f"s{si}.b{bi}.proj"
                    model._add(block.proj_name, draw((st.filters, block_in, 3, 3)))
            model.blocks.append(block)

    ncls = spec.num_classes
    if spec.head == "fc":
        model._add("head.weight", draw((ncls, c_in)))
    else:
        model._add("head.weight", draw((ncls, c_in, 1, 1)))
    model._add("head.bias", np.zeros(ncls, dtype))
    return model


def _make_layer(model, prefix, c_in, c_out, stride, k, draw):
    names = {}
    if not model.kind.generalized:
        w = model._add(f"{prefix}.weight", draw((c_out, c_in, k, k)))
        names["weight"] = f"{prefix}.weight"
        return PlainLayerParams(w, model._bn(prefix, c_out, names), stride), names

    s_in, s_out = StreamSplit.even(c_in), StreamSplit.even(c_out)
    w_rr = draw((s_out.n_r, s_in.n_r, k, k))
    w_tr = draw((s_out.n_r, s_in.n_t, k, k))
    w_rt = draw((s_out.n_t, s_in.n_r, k, k))
    w_tt = draw((s_out.n_t, s_in.n_t, k, k))
    mode = "identity" if (s_in == s_out and stride == 1) else "pad"
    if not model.fused:
        for key, arr in (("w_rr", w_rr), ("w_tr", w_tr), ("w_rt", w_rt), ("w_tt", w_tt)):
            names[key] = f"{prefix}.{key}"
            model._add(names[key], arr)
        bn = model._bn(prefix, c_out, names)
        return GeneralizedBlockParams(w_rr, w_tr, w_rt, w_tt, bn, stride, mode), names
    fused = resnet_init_fuse(w_rr, w_tr, w_rt, w_tt, s_out, identity=mode == "identity")
    name = f"{prefix}.weight"
    names["weight"] = name
    model._add(name, fused)
    if mode == "identity":
        model.masks[name] = (s_out.n_r, k)
    bn = model._bn(prefix, c_out, names)
    return FusedLayerParams(fused, s_out, s_in, bn, stride, mode), names
