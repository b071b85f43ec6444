import math

import numpy as np
import pytest

from rirkit.errors import ConfigError, ShapeError
from rirkit.init import StreamSplit, resnet_init_split
from rirkit.model import (
    BASELINE32,
    WIDE18,
    Model,
    ModelKind,
    NetSpec,
    StageSpec,
    build_network,
    count_params,
    desk_spec,
    get_spec,
    standard_specs,
)
from rirkit.streams import GeneralizedBlockParams
from rirkit.tensor import BnState, bn_relu, conv2d, global_mean_pool, linear

SMALL = NetSpec("small", 4, (StageSpec(1, 2, 4, 1), StageSpec(1, 2, 8, 2)))

# frozen from count_params; cross-checked by hand-summing the layer shapes
BASELINE32_COUNTS = {"cnn": 464154, "resnet-init": 464154, "resnet": 487194, "rir": 487194}
WIDE18_COUNTS = {"cnn": 9469930, "resnet-init": 9469930, "resnet": 10299370, "rir": 10299370}


@pytest.mark.parametrize("kind", list(BASELINE32_COUNTS))
def test_baseline32_counts(kind):
    n = count_params(build_network(BASELINE32, kind, rng=0))
    assert n == BASELINE32_COUNTS[kind]
    target = 0.46e6 if kind in ("cnn", "resnet-init") else 0.49e6
    assert abs(n - target) <= 0.03 * target


@pytest.mark.parametrize("kind", ["cnn", "rir"])
def test_wide18_counts(kind):
    n = count_params(build_network(WIDE18, kind, rng=0))
    assert n == WIDE18_COUNTS[kind]
    target = 9.5e6 if kind == "cnn" else 10.3e6
    assert abs(n - target) <= 0.03 * target


def test_count_single_conv_bn():
    m = Model(SMALL, ModelKind.CNN, True, np.dtype(np.float32))
    m._add("w", np.zeros((16, 3, 3, 3), np.float32))
    m._bn("stem", 16, {})
    assert count_params(m) == 3 * 16 * 9 + 16 + 16 == 464


@pytest.mark.parametrize("kind", ["resnet-init", "rir"])
def test_fused_unfused_twins_same_count(kind):
    a = build_network(BASELINE32, kind, rng=0, fused=True)
    b = build_network(BASELINE32, kind, rng=0, fused=False)
    assert count_params(a) == count_params(b)


def test_resnet_minus_cnn_is_projection_params():
    cnn, res = build_network(BASELINE32, "cnn", rng=0), build_network(BASELINE32, "resnet", rng=0)
    proj = sum(v.size for k, v in res.params.items() if k.endswith(".proj"))
    assert count_params(res) - count_params(cnn) == proj == 3 * 3 * (16 * 32 + 32 * 64)


def test_duplicate_names_rejected():
    m = Model(SMALL, ModelKind.CNN, True, np.dtype(np.float32))
    m._add("a", np.zeros(1))
    with pytest.raises(ConfigError):
        m._add("a", np.zeros(1))


def test_masks_only_on_fused_identity_kernels():
    m = build_network(BASELINE32, "rir", rng=0)
    assert m.masks
    for name in m.masks:
        assert name.endswith(".weight") and m.params[name].ndim == 4
    assert not build_network(BASELINE32, "resnet", rng=0).masks
    assert not build_network(BASELINE32, "rir", rng=0, fused=False).masks
    # 15 blocks x 2 layers, minus the two stride-2 layers
    assert len(m.masks) == 28


# --- specs -------------------------------------------------------------------------

def test_standard_specs():
    specs = standard_specs()
    b = specs["baseline32"]
    assert sum(s.blocks for s in b.stages) == 15
    assert [s.filters for s in b.stages] == [16, 32, 64]
    assert [s.first_stride for s in b.stages] == [1, 2, 2]
    w = specs["wide18"]
    assert [s.filters for s in w.stages] == [96, 192, 384] and w.head == "conv1x1"
    assert "desk-b2-l4-f8" in specs
    with pytest.raises(KeyError):
        get_spec("resnet1001")
    assert get_spec("wide18", 100).num_classes == 100
    assert get_spec("desk-b1-l7-f4").stages[0].layers_per_block == 7


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetSpec("x", 16, (StageSpec(1, 2, 8),))
    with pytest.raises(ConfigError):
        NetSpec("x", 16, (StageSpec(0, 2, 16),))
    with pytest.raises(ConfigError):
        NetSpec("x", 16, ())
    with pytest.raises(ConfigError):
        ModelKind.parse("densenet")
    assert ModelKind.parse("ResNet_Init") is ModelKind.RESNET_INIT


def test_tiny_forward_shape(rng):
    m = build_network("tiny", "rir", rng=0)
    assert m.forward(rng.standard_normal((2, 3, 32, 32)).astype(np.float32)).shape == (2, 10)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 1, 32, 32), np.float32))


# --- forward ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["cnn", "rir"])
@pytest.mark.parametrize("spec", [SMALL, NetSpec("h", 4, (StageSpec(1, 1, 4, 1),), head="conv1x1")])
def test_zero_head_gives_ln_k(rng, kind, spec):
    m = build_network(spec, kind, rng=1, dtype=np.float64)
    m.head_weight[...] = 0
    loss, _ = m.loss_and_grads(rng.standard_normal((3, 3, 8, 8)), np.array([0, 1, 2]), "eval")
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_forward_deterministic(rng):
    x = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
    a = build_network("tiny", "rir", rng=5).forward(x, "train", update_stats=False)
    b = build_network("tiny", "rir", rng=5).forward(x, "train", update_stats=False)
    np.testing.assert_array_equal(a, b)


def test_forward_matches_manual_composition(rng):
    """Two-stage RiR model vs. the layers composed by hand from tensor ops."""
    m = build_network(SMALL, "rir", rng=3, dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    p = m.params

    def sigma(z, prefix):
        bn = BnState(p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
                     m.buffers[f"{prefix}.bn.running_mean"].copy(), m.buffers[f"{prefix}.bn.running_var"].copy())
        return bn_relu(z, bn, "eval")[0]

    h = sigma(conv2d(x, p["stem.weight"], 1, 1), "stem")
    # stage 0: identity-embedded fused layers, identity block shortcut
    inp = h
    h = sigma(conv2d(h, p["s0.b0.l0.weight"], 1, 1), "s0.b0.l0")
    h = sigma(conv2d(h, p["s0.b0.l1.weight"], 1, 1) + inp, "s0.b0.l1")
    # stage 1: stride-2 first layer with explicit pad shortcut on r, projection block shortcut
    inp = h
    z = conv2d(h, p["s1.b0.l0.weight"], 2, 1)
    z[:, :4, :, :] += np.pad(h[:, :2, ::2, ::2], ((0, 0), (0, 2), (0, 0), (0, 0)))
    h = sigma(z, "s1.b0.l0")
    h = sigma(conv2d(h, p["s1.b0.l1.weight"], 1, 1) + conv2d(inp, p["s1.b0.proj"], 2, 1), "s1.b0.l1")
    logits = linear(global_mean_pool(h), p["head.weight"], p["head.bias"])
    np.testing.assert_allclose(m.forward(x, "eval"), logits, atol=1e-12)


@pytest.mark.parametrize("kind", ["resnet-init", "rir"])
def test_fused_unfused_twin_logits(rng, kind):
    x = rng.standard_normal((3, 3, 16, 16)).astype(np.float32)
    a = build_network(SMALL, kind, rng=7, fused=True)
    b = build_network(SMALL, kind, rng=7, fused=False)
    for mode in ("train", "eval"):
        assert np.max(np.abs(a.forward(x, mode) - b.forward(x, mode))) <= 1e-4
    fv = b.fused_view()
    assert set(fv) == set(a.params)


def test_resnet_init_with_zero_residual_blocks_is_half_width_cnn(rng):
    """Zero W_rr/W_tr/W_rt everywhere and the r head columns: only the t stream
    matters, and it is a plain CNN of half the width."""
    ri = build_network(SMALL, "resnet-init", rng=2, dtype=np.float64)
    half = NetSpec("half", 2, (StageSpec(1, 2, 2, 1), StageSpec(1, 2, 4, 2)))
    cnn = build_network(half, "cnn", rng=9, dtype=np.float64)
    cnn.params["stem.weight"][...] = ri.params["stem.weight"][2:]
    for leaf in ("gamma", "beta"):
        cnn.params[f"stem.bn.{leaf}"][...] = ri.params[f"stem.bn.{leaf}"][2:]
    for b_ri, b_cnn in zip(ri.blocks, cnn.blocks):
        for lp, lc, names_ri, names_c in zip(b_ri.layers, b_cnn.layers, b_ri.names, b_cnn.names):
            nr_o, nr_i = lp.split.n_r, lp.in_split.n_r
            lp.weight[:nr_o] = 0
            lp.weight[nr_o:, :nr_i] = 0
            if lp.shortcut_mode == "identity":
                lp.weight[np.arange(nr_o), np.arange(nr_o), 1, 1] = 1
            lc.weight[...] = lp.weight[nr_o:, nr_i:]
            for leaf in ("gamma", "beta"):
                cnn.params[names_c[leaf]][...] = ri.params[names_ri[leaf]][nr_o:]
    ri.head_weight[:, :4] = 0
    cnn.head_weight[...] = ri.head_weight[:, 4:]
    cnn.head_bias[...] = ri.head_bias
    x = rng.standard_normal((3, 3, 8, 8))
    for mode in ("train", "eval"):
        np.testing.assert_allclose(ri.forward(x, mode, False), cnn.forward(x, mode, False), atol=1e-12)


# --- backward ---------------------------------------------------------------------------

def test_backward_returns_all_params_and_mutates_nothing(rng):
    m = build_network(SMALL, "rir", rng=0)
    before = {k: v.copy() for k, v in m.params.items()}
    _, grads = m.loss_and_grads(rng.standard_normal((4, 3, 8, 8)).astype(np.float32), rng.integers(0, 10, 4))
    assert set(grads) == set(m.params)
    for k, v in m.params.items():
        np.testing.assert_array_equal(v, before[k])
        assert grads[k].shape == v.shape


@pytest.mark.parametrize("kind", ["cnn", "resnet", "resnet-init", "rir"])
def test_model_gradient_spot_check(kind):
    m = build_network(SMALL, kind, rng=4, dtype=np.float64)
    r = np.random.default_rng(8)
    x, y = r.standard_normal((4, 3, 6, 6)), r.integers(0, 10, 4)
    m.head_bias[...] = r.standard_normal(10) * 0.1
    _, g = m.loss_and_grads(x, y, update_stats=False)
    names = sorted(m.params)
    h = 1e-5
    for _ in range(10):
        name = names[int(r.integers(len(names)))]
        flat = m.params[name].reshape(-1)
        i = int(r.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        fp, _ = m.loss_and_grads(x, y, update_stats=False)
        flat[i] = old - h
        fm, _ = m.loss_and_grads(x, y, update_stats=False)
        flat[i] = old
        num, ana = (fp - fm) / (2 * h), g[name].reshape(-1)[i]
        assert abs(num - ana) <= 1e-5 * max(abs(num), abs(ana), 1e-6), (name, i, num, ana)


def test_duplicate_sample_doubles_contribution(rng):
    m = build_network(SMALL, "rir", rng=0, dtype=np.float64)
    a, b = rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((1, 3, 8, 8))
    _, ga = m.loss_and_grads(a, np.array([1]), "eval")
    _, gb = m.loss_and_grads(b, np.array([4]), "eval")
    _, gab = m.loss_and_grads(np.concatenate([a, a, b]), np.array([1, 1, 4]), "eval")
    for k in gab:
        np.testing.assert_allclose(gab[k], (2 * ga[k] + gb[k]) / 3, atol=1e-12)


def test_zero_head_bias_gradient_closed_form(rng):
    m = build_network(SMALL, "cnn", rng=0, dtype=np.float64)
    m.head_weight[...] = 0
    labels = np.array([0, 0, 3, 9])
    _, g = m.loss_and_grads(rng.standard_normal((4, 3, 8, 8)), labels, "eval")
    onehot_mean = np.bincount(labels, minlength=10) / 4
    np.testing.assert_allclose(g["head.bias"], 0.1 - onehot_mean, atol=1e-15)


def test_eval_mode_leaves_running_stats(rng):
    m = build_network(SMALL, "rir", rng=0)
    before = {k: v.copy() for k, v in m.buffers.items()}
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    m.forward(x, "eval")
    m.loss_and_grads(x, np.array([0, 1]), "eval")
    for k, v in m.buffers.items():
        np.testing.assert_array_equal(v, before[k])
    m.forward(x, "train")
    assert any(not np.array_equal(v, before[k]) for k, v in m.buffers.items())


def test_ablated_context_restores_bitwise(rng):
    m = build_network(SMALL, "rir", rng=0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    base = m.forward(x)
    saved = {k: v.copy() for k, v in m.params.items()}
    with m.ablated("transient", 2):
        assert not np.array_equal(m.forward(x), base)
    np.testing.assert_array_equal(m.forward(x), base)
    for k, v in m.params.items():
        np.testing.assert_array_equal(v, saved[k])
    with pytest.raises(IndexError):
        with m.ablated("residual", 4):
            pass


def test_ablation_zeroes_learned_blocks_in_model(rng):
    m = build_network(SMALL, "rir", rng=0)
    bi, li = m.fused_layers()[0]
    p = m.blocks[bi].layers[li]
    with m.ablated("residual", 0):
        rr, tr, rt, tt = resnet_init_split(p.weight, p.split)
        assert not np.any(rr) and not np.any(rt) and np.any(tt)


def test_load_state_roundtrip(rng):
    a = build_network(SMALL, "rir", rng=0)
    b = build_network(SMALL, "rir", rng=1)
    b.load_state(a.state())
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(a.forward(x), b.forward(x))
    with pytest.raises(ConfigError):
        b.load_state({"nope": np.zeros(1)})
    with pytest.raises(ShapeError):
        b.load_state({**a.state(), "head.bias": np.zeros(3)})


def test_initializers_build(rng):
    for init in ("xavier", "msr", "orthogonal"):
        m = build_network(SMALL, "rir", init=init, rng=0)
        assert np.isfinite(m.forward(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))).all()


def test_desk_spec_family():
    s = desk_spec(2, 3, 8)
    assert s.name == "desk-b2-l3-f8" and s.stem_filters == 16
    assert [(st.blocks, st.layers_per_block, st.filters) for st in s.stages] == [(2, 3, 16), (2, 3, 32), (2, 3, 64)]
    m = build_network(s, "rir", rng=0)
    assert isinstance(build_network(s, "rir", rng=0, fused=False).blocks[0].layers[0], GeneralizedBlockParams)
    assert StreamSplit.even(s.stem_filters) == StreamSplit(8, 8)
