"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--train-steps N]

Prints one row per kernel with the best-of-N time for each backend and the
speedup, then the wall time of full training steps on the default model.
"""

import argparse
import time

import numpy as np

from svphw import _kernels
from svphw.data import SpriteWorldConfig, generate_sequence
from svphw.model import SVPHW, ModelConfig
from svphw.train import Adam, sample_batch, train_step


def best_time(fn, repeat):
    fn()  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    f32 = np.float32
    x = rng.normal(size=(1, 32, 64, 64)).astype(f32)
    w3 = rng.normal(size=(32, 3, 3)).astype(f32)
    x2 = rng.normal(size=(1, 64, 32, 32)).astype(f32)
    w2 = rng.normal(size=(64, 3, 3)).astype(f32)
    g1 = rng.normal(size=(1, 32, 64, 64)).astype(f32)
    g2 = rng.normal(size=(1, 64, 16, 16)).astype(f32)
    src = rng.uniform(size=(1, 1, 64, 64)).astype(f32)
    flow = rng.uniform(-3, 3, size=(1, 2, 64, 64)).astype(f32)
    gsrc = rng.normal(size=src.shape).astype(f32)
    gden = rng.normal(size=(1, 64, 64)).astype(f32)
    cx = rng.normal(size=(1, 8, 32, 32))
    cw = rng.normal(size=(16, 8, 3, 3))
    return {
        "depthwise fwd 3x3 s1 32x64x64": lambda: _kernels.depthwise_forward(x, w3, 1, 1),
        "depthwise bwd 3x3 s1 32x64x64": lambda: _kernels.depthwise_backward(x, w3, g1, 1, 1),
        "depthwise fwd 3x3 s2 64x32x32": lambda: _kernels.depthwise_forward(x2, w2, 2, 1),
        "depthwise bwd 3x3 s2 64x32x32": lambda: _kernels.depthwise_backward(x2, w2, g2, 2, 1),
        "backward warp fwd 64x64": lambda: _kernels.bwarp_forward(src, flow),
        "backward warp bwd 64x64": lambda: _kernels.bwarp_backward(src, flow, gsrc),
        "splat accumulate 64x64": lambda: _kernels.splat_accumulate(src, flow),
        "splat bwd 64x64": lambda: _kernels.splat_backward(src, flow, gsrc, gden),
        "direct conv 8->16 32x32": lambda: _kernels.conv2d_direct(cx, cw, 1, 1),
    }


def train_step_time(steps):
    cfg = ModelConfig()
    seqs = [generate_sequence(SpriteWorldConfig(), i) for i in range(2)]
    model = SVPHW(cfg)
    opt = Adam(model.params, lr=cfg.lr)
    clip_len = cfg.cond_frames + cfg.horizon
    train_step(model, opt, sample_batch(seqs, cfg.batch_size, clip_len, 0, 0), 0)
    t0 = time.perf_counter()
    for s in range(1, steps + 1):
        train_step(model, opt, sample_batch(seqs, cfg.batch_size, clip_len, 0, s), s)
    return (time.perf_counter() - t0) / steps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = kernel_cases(np.random.default_rng(0))
    prev = _kernels.get_backend()
    times = {}
    try:
        for backend in ("numpy", "numba"):
            _kernels.set_backend(backend)
            times[backend] = {name: best_time(fn, args.repeat) for name, fn in cases.items()}
            if args.train_steps:
                times[backend]["train step (default model)"] = train_step_time(args.train_steps)
    finally:
        _kernels.set_backend(prev)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name in times["numpy"]:
        a, b = times["numpy"][name] * 1e3, times["numba"][name] * 1e3
        print(f"{name:34s} {a:10.3f} {b:10.3f} {a / b:7.1f}x")


if __name__ == "__main__":
    main()
