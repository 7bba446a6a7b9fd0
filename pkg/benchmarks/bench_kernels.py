"""Compare the compiled and numpy convolution backends.

Times the three kernel primitives at the shapes this codebase actually
hits during training (stem, full-res blocks, half-res blocks, temporal
point-wise convs), then a full velocity-network training step with each
backend end to end.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from flowcast import cascade, kernels, optim, stunet
from flowcast.backbone import Backbone, BackboneConfig
from flowcast.data import AdvectionParams, synth_advection, window_samples

SHAPES = [
    ("stem 2->8 @32^2 (40 frames)", (40, 2, 8, 32, 3)),
    ("block 8->8 @32^2", (40, 8, 8, 32, 3)),
    ("block 16->16 @16^2", (40, 16, 16, 16, 3)),
    ("block 16->16 @8^2", (40, 16, 16, 8, 3)),
    ("temporal 40->10 @32^2 (1x1)", (8, 40, 10, 32, 1)),
]


def time_fn(fn, repeat):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_primitives(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape':36s} {'primitive':10s} " + "".join(f"{b:>12s}" for b in kernels.available_backends()))
    for label, (n, ci, co, h, k) in SHAPES:
        x = rng.standard_normal((n, ci, h, h)).astype(np.float32)
        w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        gy = rng.standard_normal((n, co, h, h)).astype(np.float32)
        pad = (k - 1) // 2
        for prim, fn in (("fwd", lambda: kernels.conv2d_fwd(x, w, pad)),
                         ("bwd_in", lambda: kernels.conv2d_bwd_input(gy, w, pad)),
                         ("bwd_kern", lambda: kernels.conv2d_bwd_kernel(x, gy, k, pad))):
            row = []
            for backend in kernels.available_backends():
                kernels.set_backend(backend)
                row.append(time_fn(fn, repeat) * 1e3)
            kernels.set_backend("auto")
            cells = "".join(f"{ms:10.2f}ms" for ms in row)
            print(f"{label:36s} {prim:10s} {cells}")


def bench_training_step(repeat):
    params = AdvectionParams(max_speed=0.7)
    samples = [s for q in synth_advection(1, 4, 25, 32, 32, params) for s in window_samples(q)]
    print(f"\n{'end-to-end step':36s} " + "".join(f"{b:>12s}" for b in kernels.available_backends()))
    for label, runner in (("backbone train step (batch 8)", _backbone_step),
                          ("generator train step (batch 8)", _generator_step)):
        row = []
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            row.append(runner(samples, repeat) * 1e3)
        kernels.set_backend("auto")
        print(f"{label:36s} " + "".join(f"{ms:10.0f}ms" for ms in row))


def _backbone_step(samples, repeat):
    rng = np.random.default_rng(2)
    model = Backbone(BackboneConfig(), rng)
    from flowcast.backbone import train_backbone

    t0 = time.perf_counter()
    train_backbone(model, samples, steps=repeat, batch=8, rng=rng,
                   spec=optim.OptimizerSpec(lr_max=1e-3))
    return (time.perf_counter() - t0) / repeat


def _generator_step(samples, repeat):
    rng = np.random.default_rng(3)
    bb = Backbone(BackboneConfig(), rng)
    bb.freeze()
    gen = stunet.STUNet(stunet.STUNetConfig(), rng)
    sched = cascade.SegmentSchedule(5, 20)
    t0 = time.perf_counter()
    cascade.train_generator(gen, bb, samples, steps=repeat, batch=8, rng=rng, schedule=sched,
                            spec=optim.OptimizerSpec(lr_max=1e-3))
    return (time.perf_counter() - t0) / repeat


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"active backend at import: {kernels.backend_name()}")
    bench_primitives(args.repeat)
    bench_training_step(max(args.repeat // 2, 5))
