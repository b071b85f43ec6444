"""Self-checks behind ``rirkit verify``.

Each check returns a :class:`CheckResult` carrying the largest deviation it
observed and the tolerance it was held to. ``fault`` perturbs the fused
kernels by 1e-2 so the equivalence check can be shown to fail.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .init import StreamSplit, msr_init
from .model import NetSpec, StageSpec, build_network
from .optim import OptConfig, Optimizer
from .streams import (
    FusedLayerParams,
    GeneralizedBlockParams,
    PlainLayerParams,
    build_embedded_resnet_block,
    fuse_block,
    layer_backward,
    layer_forward,
)
from .tensor import (
    BnState,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    global_mean_pool,
    global_mean_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

FAULT = 1e-2


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_dev: float
    tol: float
    detail: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        msg = f"{tag}  {self.name:<28} max_dev={self.max_dev:.3e} tol={self.tol:.1e} ({self.seconds:.1f}s)"
        return msg + (f"  {self.detail}" if self.detail else "")


def _rel(a, b):
    """Normwise relative deviation of ``a`` from reference ``b``."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


# ---------------------------------------------------------------------------
# fused / unfused equivalence
# ---------------------------------------------------------------------------

def random_generalized_layer(rng, split, k, dtype, bn=True):
    blocks = [msr_init((o, i, k, k), rng, dtype) for o, i in
              ((split.n_r, split.n_r), (split.n_r, split.n_t), (split.n_t, split.n_r), (split.n_t, split.n_t))]
    state = None
    if bn:
        state = BnState.create(split.total, dtype)
        state.gamma[...] = rng.uniform(0.5, 1.5, split.total)
        state.beta[...] = rng.uniform(-0.2, 0.2, split.total)
    return GeneralizedBlockParams(*blocks, bn=state)


def equivalence_configs(count=200, seed=0):
    """(n_r, n_t, k, H, W, N, seed) tuples spanning the required grid."""
    rng = np.random.default_rng(seed)
    sizes, ks, hw = (1, 2, 4, 8), (1, 3), (4, 8)
    out = []
    for i in range(count):
        out.append((int(rng.choice(sizes)), int(rng.choice(sizes)), int(rng.choice(ks)),
                    int(rng.choice(hw)), int(rng.choice(hw)), int(rng.integers(1, 4)), i))
    return out


def fused_unfused_pair(cfg, dtype, fault=False):
    n_r, n_t, k, h, w, n, seed = cfg
    rng = np.random.default_rng(seed)
    split = StreamSplit(n_r, n_t)
    unf = random_generalized_layer(rng, split, k, dtype)
    fus = fuse_block(unf, bn=unf.bn.copy())
    if fault:
        fus.weight[...] += dtype(FAULT)
    x = rng.standard_normal((n, split.total, h, w)).astype(dtype)
    dy = rng.standard_normal((n, split.total, h, w)).astype(dtype)
    return unf, fus, x, dy


def check_equivalence(count=200, fault=False):
    t0 = time.perf_counter()
    fwd = {np.float32: 0.0, np.float64: 0.0}
    grad32 = 0.0
    for cfg in equivalence_configs(count):
        for dtype in (np.float32, np.float64):
            unf, fus, x, dy = fused_unfused_pair(cfg, dtype, fault)
            yu, cu = layer_forward(unf, x, "train")
            yf, cf = layer_forward(fus, x, "train")
            fwd[dtype] = max(fwd[dtype], float(np.max(np.abs(yu - yf))))
            if dtype is np.float32:
                dxu, _, _ = layer_backward(unf, dy, cu)
                dxf, _, _ = layer_backward(fus, dy, cf)
                grad32 = max(grad32, _rel(dxf, dxu))
    ok32, ok64, okg = fwd[np.float32] <= 1e-5, fwd[np.float64] <= 1e-12, grad32 <= 1e-4
    detail = f"f32 fwd {fwd[np.float32]:.2e}/1e-5, f64 fwd {fwd[np.float64]:.2e}/1e-12, f32 dx rel {grad32:.2e}/1e-4"
    return CheckResult(
        "fused-unfused-equivalence", ok32 and ok64 and okg, fwd[np.float32], 1e-5, detail,
        time.perf_counter() - t0, {"f32": fwd[np.float32], "f64": fwd[np.float64], "grad_rel": grad32},
    )


# ---------------------------------------------------------------------------
# two generalized layers == one 2-layer ResNet block
# ---------------------------------------------------------------------------

def resnet_block_direct(r, conv1, conv2):
    pad = conv1.shape[2] // 2
    return relu(conv2d(relu(conv2d(r, conv1, 1, pad)), conv2, 1, pad) + r)


def embedded_cascade(r, l1, l2, n_t):
    x = np.concatenate([r, np.zeros((r.shape[0], n_t) + r.shape[2:], r.dtype)], axis=1)
    h, _ = layer_forward(l1, x, "eval")
    y, _ = layer_forward(l2, h, "eval")
    return y[:, : r.shape[1]]


def check_embedded_resnet_block(trials=100, seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n_r, n_t = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        h = int(rng.integers(2, 9))
        conv1 = rng.standard_normal((n_t, n_r, 3, 3)).astype(np.float32)
        conv2 = rng.standard_normal((n_r, n_t, 3, 3)).astype(np.float32)
        r = np.abs(rng.standard_normal((2, n_r, h, h))).astype(np.float32)
        l1, l2 = build_embedded_resnet_block(conv1, conv2, StreamSplit(n_r, n_t))
        worst = max(worst, float(np.max(np.abs(embedded_cascade(r, l1, l2, n_t) - resnet_block_direct(r, conv1, conv2)))))
    return CheckResult("embedded-resnet-block", worst <= 1e-6, worst, 1e-6, f"{trials} non-negative inputs",
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# identity-centred decay: fused vs unfused trajectories
# ---------------------------------------------------------------------------

TWIN_SPEC = NetSpec("twin", 8, (StageSpec(1, 2, 8, 1), StageSpec(1, 2, 16, 2)))


def twin_trajectory(steps=100, center=True, l2=1e-4, lr=0.1, kind="rir", opt="sgdm", seed=0, fault=False):
    """Max parameter deviation (fused layout) between fused and unfused twins."""
    fused = build_network(TWIN_SPEC, kind, rng=seed, fused=True)
    unfused = build_network(TWIN_SPEC, kind, rng=seed, fused=False)
    if fault:
        for name in fused.masks:
            fused.params[name][...] += np.float32(FAULT)
    cfg = OptConfig(opt, lr, l2=l2, center_decay=center)
    opt_f = Optimizer(cfg, fused.identity_masks())
    opt_u = Optimizer(cfg, unfused.identity_masks())
    rng = np.random.default_rng(seed + 1)
    batches = [(rng.standard_normal((8, 3, 8, 8)).astype(np.float32), rng.integers(0, 10, 8)) for _ in range(4)]
    worst = 0.0
    for s in range(steps):
        x, y = batches[s % len(batches)]
        _, gf = fused.loss_and_grads(x, y)
        _, gu = unfused.loss_and_grads(x, y)
        opt_f.step(fused.params, gf, lr)
        opt_u.step(unfused.params, gu, lr)
        vf, vu = fused.fused_view(), unfused.fused_view()
        worst = max(worst, max(float(np.max(np.abs(vf[n] - vu[n]))) for n in vf))
    return worst


def check_decay_twins(steps=100, fault=False):
    t0 = time.perf_counter()
    centred = twin_trajectory(steps, center=True, fault=fault)
    plain = twin_trajectory(steps, center=False, fault=fault)
    ok = centred <= 1e-4 and plain > 1e-3
    detail = f"centred {centred:.2e}<=1e-4, uncentred {plain:.2e}>1e-3"
    return CheckResult("decay-twin-trajectory", ok, centred, 1e-4, detail, time.perf_counter() - t0,
                       {"centred": centred, "uncentred": plain})


# ---------------------------------------------------------------------------
# gradient checks (central differences, f64)
# ---------------------------------------------------------------------------

def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _kernel_cases(rng):
    """Yield (name, max relative error) for every kernel on random f64 shapes."""
    f64 = np.float64
    # conv2d: input and kernel gradients
    for _ in range(8):
        n, c, f = (int(v) for v in rng.integers(1, 4, 3))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 2))
        h = int(rng.integers(k, 7))
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((f, c, k, k))
        y0 = conv2d(x, w, stride, pad)
        dy = rng.standard_normal(y0.shape)
        dx, dw = conv2d_backward(dy, x, w, stride, pad)
        loss = lambda: float(np.sum(conv2d(x, w, stride, pad) * dy))  # noqa: E731
        yield "conv2d.dx", _rel(dx, numeric_grad(loss, x))
        yield "conv2d.dw", _rel(dw, numeric_grad(loss, w))
    # batchnorm, train and eval
    for mode in ("train", "eval", "train", "eval"):
        n, c, h = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((n, c, h, h))
        st = BnState.create(c, f64)
        st.gamma[...] = rng.uniform(0.5, 1.5, c)
        st.beta[...] = rng.standard_normal(c)
        st.running_mean[...] = rng.standard_normal(c)
        st.running_var[...] = rng.uniform(0.5, 2, c)
        y0, cache = batchnorm(x, st, mode, update_stats=False)
        dy = rng.standard_normal(y0.shape)
        dx, dg, db = batchnorm_backward(dy, cache)
        loss = lambda: float(np.sum(batchnorm(x, st, mode, update_stats=False)[0] * dy))  # noqa: E731
        yield f"batchnorm[{mode}].dx", _rel(dx, numeric_grad(loss, x))
        yield f"batchnorm[{mode}].dgamma", _rel(dg, numeric_grad(loss, st.gamma))
        yield f"batchnorm[{mode}].dbeta", _rel(db, numeric_grad(loss, st.beta))
    # relu, away from the kink
    for _ in range(2):
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        dy = rng.standard_normal(x.shape)
        loss = lambda: float(np.sum(relu(x) * dy))  # noqa: E731
        yield "relu", _rel(relu_backward(dy, x), numeric_grad(loss, x))
    # pooling
    for _ in range(2):
        x = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 5, 4)))
        dy = rng.standard_normal(x.shape[:2])
        loss = lambda: float(np.sum(global_mean_pool(x) * dy))  # noqa: E731
        yield "global_mean_pool", _rel(global_mean_pool_backward(dy, x.shape), numeric_grad(loss, x))
    # linear
    for _ in range(2):
        n, i, o = (int(v) for v in rng.integers(1, 6, 3))
        x, w, b = rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)
        dy = rng.standard_normal((n, o))
        dx, dw, db = linear_backward(dy, x, w)
        loss = lambda: float(np.sum(linear(x, w, b) * dy))  # noqa: E731
        yield "linear.dx", _rel(dx, numeric_grad(loss, x))
        yield "linear.dw", _rel(dw, numeric_grad(loss, w))
        yield "linear.db", _rel(db, numeric_grad(loss, b))
    # softmax cross-entropy
    for _ in range(2):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 8))
        z, lab = rng.standard_normal((n, k)) * 3, rng.integers(0, k, n)
        _, g = softmax_cross_entropy(z, lab)
        yield "softmax_cross_entropy", _rel(g, numeric_grad(lambda: softmax_cross_entropy(z, lab)[0], z))
    # whole generalized layers (BN + ReLU + shortcut), fused and unfused
    for shortcut in ("identity", "pad"):
        split = StreamSplit(int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        unf = random_generalized_layer(rng, split, 3, f64)
        stride = 1
        if shortcut == "pad":
            stride = 2
            unf = GeneralizedBlockParams(unf.w_rr, unf.w_tr, unf.w_rt, unf.w_tt, unf.bn, 2, "pad")
        for p in (unf, fuse_block(unf, bn=unf.bn.copy())):
            x = rng.standard_normal((2, split.total, 4, 4))
            y0, _ = layer_forward(p, x, "train", update_stats=False)
            dy = rng.standard_normal(y0.shape)
            _, cache = layer_forward(p, x, "train", update_stats=False)
            dx, grads, _ = layer_backward(p, dy, cache)
            loss = lambda: float(np.sum(layer_forward(p, x, "train", update_stats=False)[0] * dy))  # noqa: E731
            tag = "fused" if isinstance(p, FusedLayerParams) else "unfused"
            yield f"layer[{tag},{shortcut},s{stride}].dx", _rel(dx, numeric_grad(loss, x))
            w = p.weight if isinstance(p, FusedLayerParams) else p.w_tr
            gw = grads["weight"] if isinstance(p, FusedLayerParams) else grads["w_tr"]
            yield f"layer[{tag},{shortcut},s{stride}].dW", _rel(gw, numeric_grad(loss, w))
    # plain layer with projection-free stride
    p = PlainLayerParams(rng.standard_normal((3, 2, 3, 3)), BnState.create(3, f64), 2)
    x = rng.standard_normal((2, 2, 5, 5))
    y0, cache = layer_forward(p, x, "train", update_stats=False)
    dy = rng.standard_normal(y0.shape)
    dx, grads, _ = layer_backward(p, dy, cache)
    loss = lambda: float(np.sum(layer_forward(p, x, "train", update_stats=False)[0] * dy))  # noqa: E731
    yield "layer[plain,s2].dx", _rel(dx, numeric_grad(loss, x))


def model_spot_check(kind="rir", n_params=10, seed=0, h=1e-5):
    """Relative errors of the model's analytic gradient at random entries, f64."""
    spec = NetSpec("spot", 4, (StageSpec(1, 2, 4, 1), StageSpec(1, 2, 8, 2)))
    model = build_network(spec, kind, rng=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((4, 3, 6, 6))
    y = rng.integers(0, 10, 4)
    model.params["head.bias"][...] = rng.standard_normal(10) * 0.1
    _, grads = model.loss_and_grads(x, y, update_stats=False)
    names = sorted(model.params)
    errs = []
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        p = model.params[name].reshape(-1)
        i = int(rng.integers(p.size))
        old = p[i]
        p[i] = old + h
        fp, _ = model.loss_and_grads(x, y, update_stats=False)
        p[i] = old - h
        fm, _ = model.loss_and_grads(x, y, update_stats=False)
        p[i] = old
        num = (fp - fm) / (2 * h)
        ana = float(grads[name].reshape(-1)[i])
        errs.append((name, i, abs(ana - num) / max(abs(ana), abs(num), 1e-8)))
    return errs


def check_gradients(seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cases = list(_kernel_cases(rng))
    kernel_worst = max(e for _, e in cases)
    worst_name = max(cases, key=lambda c: c[1])[0]
    spot = model_spot_check("rir", 10, seed) + model_spot_check("resnet", 10, seed)
    spot_worst = max(e for *_, e in spot)
    ok = kernel_worst <= 1e-6 and spot_worst <= 1e-5 and len(cases) >= 20
    detail = (f"{len(cases)} kernel cases worst {kernel_worst:.2e}<=1e-6 ({worst_name}); "
              f"model spot {spot_worst:.2e}<=1e-5")
    return CheckResult("gradient-suite", ok, kernel_worst, 1e-6, detail, time.perf_counter() - t0,
                       {"kernel": kernel_worst, "spot": spot_worst, "cases": len(cases)})


# ---------------------------------------------------------------------------

def run_all(fault=False, configs=200, out=print):
    results = [
        check_equivalence(configs, fault),
        check_embedded_resnet_block(),
        check_decay_twins(fault=fault),
        check_gradients(),
    ]
    for r in results:
        out(r.line())
    return results
