"""Compare the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times fused BN+ReLU forward/backward on typical activation shapes, the
numpy im2col/conv path (shared by both backends), and one full training
step of the tiny RiR network. The backend is switched in-process through
``rirkit._accel.USE_NUMBA``; the environment flag ``RIRKIT_DISABLE_NUMBA``
selects the same fallback at import time.
"""
import argparse
import time

import numpy as np

from rirkit import _accel
from rirkit.model import build_network
from rirkit.optim import OptConfig, Optimizer
from rirkit.tensor import BnState, bn_relu, bn_relu_backward, conv2d, conv2d_backward

SHAPES = [(100, 16, 32, 32), (100, 32, 16, 16), (100, 64, 8, 8)]


def best_of(fn, repeat):
    fn()  # warm-up (jit compile on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_bn_relu(shape, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    dy = rng.standard_normal(shape).astype(np.float32)
    st = BnState.create(shape[1])

    def run():
        _, cache = bn_relu(x, st, "train")
        bn_relu_backward(dy, cache)

    return best_of(run, repeat)


def bench_conv(shape, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    w = rng.standard_normal((shape[1], shape[1], 3, 3)).astype(np.float32)

    def run():
        y = conv2d(x, w, 1, 1)
        conv2d_backward(y, x, w, 1, 1)

    return best_of(run, repeat)


def bench_step(repeat):
    model = build_network("tiny", "rir", rng=0)
    opt = Optimizer(OptConfig(), model.identity_masks())
    rng = np.random.default_rng(1)
    x = rng.standard_normal((100, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, 100)

    def run():
        _, g = model.loss_and_grads(x, y)
        opt.step(model.params, g, 0.01)

    return best_of(run, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba not importable; only the numpy backend can be timed")
    backends = [b for b in (True, False) if b is False or _accel.HAVE_NUMBA]
    rows = []
    for shape in SHAPES:
        rows.append((f"bn_relu fwd+bwd {shape}", lambda s=shape: bench_bn_relu(s, args.repeat)))
    for shape in SHAPES:
        rows.append((f"conv3x3 fwd+bwd {shape}", lambda s=shape: bench_conv(s, args.repeat)))
    rows.append(("tiny RiR train step, batch 100", lambda: bench_step(args.repeat)))
    print(f"{'case':<44}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    saved = _accel.USE_NUMBA
    try:
        for name, fn in rows:
            t = {}
            for use in backends:
                _accel.USE_NUMBA = use
                t[use] = fn() * 1e3
            nb = t.get(True, float("nan"))
            print(f"{name:<44}{nb:>10.1f}{t[False]:>10.1f}{t[False] / nb:>8.2f}x")
    finally:
        _accel.USE_NUMBA = saved


if __name__ == "__main__":
    main()
