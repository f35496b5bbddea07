"""Time the compiled and numpy kernels on training-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from viralnet import _pykernels

try:
    from viralnet import _ckernels
except ImportError:
    _ckernels = None

# (batch, channels, size) -> (out, k): the first conv of each stack at batch 64
CONVS = [((64, 3, 64, 64), (4, 3, 5, 5)), ((128, 3, 32, 32), (8, 3, 5, 5)),
         ((128, 8, 14, 14), (16, 8, 3, 3))]


def best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    rows = []
    for xs, ws in CONVS:
        x, w, b = rng.random(xs), rng.random(ws), rng.random(ws[0])
        out = _pykernels.conv2d_forward(x, w, b, 1)
        g = rng.random(out.shape)
        for name, k in impls:
            rows.append((f"conv fwd {xs}", name, best(lambda: k.conv2d_forward(x, w, b, 1), args.repeat)))
            rows.append((f"conv bwd {xs}", name,
                         best(lambda: k.conv2d_backward(x, w, g, 1, True), args.repeat)))
    img = rng.random((64, 3, 64, 64))
    px, py = rng.uniform(0, 63, (2, 64, 32, 32))
    up = rng.random((64, 3, 32, 32))
    for name, k in impls:
        rows.append(("sample fwd", name, best(lambda: k.bilinear_forward(img, px, py), args.repeat)))
        rows.append(("sample bwd", name,
                     best(lambda: k.bilinear_backward(img, px, py, up, True), args.repeat)))
    ref = {label: t for label, name, t in rows if name == "python"}
    print(f"{'kernel':<34} {'backend':<8} {'ms':>9} {'speedup':>8}")
    for label, name, t in rows:
        print(f"{label:<34} {name:<8} {t * 1e3:9.2f} {ref[label] / t:8.2f}")


if __name__ == "__main__":
    main()
