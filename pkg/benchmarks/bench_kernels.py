"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 20] [--step]

Kernel timings call both implementations directly, so one process covers
both. ``--step`` also times one Decom-Net training step end to end in two
subprocesses, one with BIRDDET_DISABLE_NUMBA=1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from birddet import kernels

STEP_SNIPPET = """
import timeit
from birddet import backend
from birddet.dataio import make_pairs
from birddet.retinex import DecomNetParams, decom_total_loss
from birddet import autodiff as ad
import numpy as np
pairs = make_pairs(16, size=32, seed=0)
low = np.stack([p[0] for p in pairs]); normal = np.stack([p[1] for p in pairs])
params = DecomNetParams.init(0)
def step():
    g = ad.Graph()
    ad.backward(g, decom_total_loss(low, normal, params, graph=g))
    g.release()
step()
print(backend(), min(timeit.repeat(step, number=1, repeat={repeat})))
"""


def best_of(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    for n, c, o, hw, stride in [(16, 16, 16, 32, 1), (16, 16, 16, 32, 2), (1, 3, 16, 500, 1), (16, 32, 4, 8, 1)]:
        xp = rng.normal(size=(n, c, hw + 2, hw + 2))
        w = rng.normal(size=(o, c, 3, 3))
        b = rng.normal(size=o)
        out = kernels.conv2d_forward_np(xp, w, b, stride)
        g = rng.normal(size=out.shape)
        label = f"{n}x{c}x{hw}x{hw} -> {o}, s{stride}"
        yield (f"conv fwd {label}", lambda: kernels.conv2d_forward_jit(xp, w, b, stride),
               lambda: kernels.conv2d_forward_np(xp, w, b, stride))
        yield (f"conv bwd {label}", lambda: kernels.conv2d_backward_jit(xp, w, g, stride)[0],
               lambda: kernels.conv2d_backward_np(xp, w, g, stride)[0])
    boxes = rng.uniform(0.01, 1, size=(5000, 2))
    anchors = rng.uniform(0.01, 1, size=(9, 2))
    yield ("wh iou 5000x9", lambda: kernels.wh_iou_matrix_jit(boxes, anchors),
           lambda: kernels.wh_iou_matrix_np(boxes, anchors))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'case':<42} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, jit_fn, np_fn in kernel_cases(rng):
        t_jit, t_np = best_of(jit_fn, args.repeat), best_of(np_fn, args.repeat)
        diff = float(np.abs(np.asarray(jit_fn()) - np.asarray(np_fn())).max())
        print(f"{name:<42} {t_jit * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_jit:8.2f} {diff:11.1e}")

    if args.step:
        code = STEP_SNIPPET.format(repeat=max(3, args.repeat // 4))
        for disable in ("0", "1"):
            env = {**os.environ, "BIRDDET_DISABLE_NUMBA": disable}
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            name, seconds = out.stdout.split()
            print(f"decom train step (16x3x32x32), {name:<6} {float(seconds) * 1e3:10.1f} ms")


if __name__ == "__main__":
    main()
