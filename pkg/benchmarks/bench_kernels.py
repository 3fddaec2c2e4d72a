"""Timing comparison of the numba and pure-numpy kernel backends.

Run:  python benchmarks/bench_kernels.py [--repeats N]

Times every hot kernel on small (toy training) and large (VGA image)
working sizes with both backends and prints the speedup. The numba path
is warmed up first so JIT compilation is not measured.
"""

import argparse
import time

import numpy as np

from mrvlad import kernels


def _time(fn, args, repeats):
    fn(*args)  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def cases():
    rng = np.random.default_rng(0)
    taps = np.array([0.054, 0.244, 0.403, 0.244, 0.054], dtype=np.float32)
    for h, w, tag in ((64, 64, "64x64"), (480, 640, "480x640")):
        x = rng.random((h, w, 3)).astype(np.float32)
        k1 = rng.standard_normal((3, 3, 3, 8)).astype(np.float32)
        b1 = np.zeros(8, dtype=np.float32)
        gy = rng.standard_normal((h // 2, w // 2, 8)).astype(np.float32)
        yield f"conv2d_forward {tag}", "conv2d_forward", (x, k1, b1, 2)
        yield f"conv2d_bwd_input {tag}", "conv2d_backward_input", (k1, gy, h, w, 2)
        yield f"conv2d_bwd_params {tag}", "conv2d_backward_params", (x, gy, 3, 2)
        yield f"blur5 {tag}", "blur5", (x, taps)
        yield f"bilinear_resize {tag}", "bilinear_resize", (x, int(h / 1.414), int(w / 1.414))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    if kernels.numba_impl is None:
        print("numba unavailable; nothing to compare")
        return

    print(f"{'kernel':<28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>9s}")
    for label, name, fargs in cases():
        t_nb = _time(getattr(kernels.numba_impl, name), fargs, args.repeats)
        t_np = _time(getattr(kernels.numpy_impl, name), fargs, args.repeats)
        print(f"{label:<28s} {t_nb*1e3:>10.3f} {t_np*1e3:>10.3f} {t_np/t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
