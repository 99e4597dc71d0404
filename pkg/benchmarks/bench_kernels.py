"""Benchmark the conv2d kernel backends on training-shaped workloads.

Runs forward, backward-input, and backward-kernel for each backend on the
convolution shapes the encoder actually executes (patch-embedding stages and
the multi-scale FFN branches), reports median wall time per call, and checks
that both backends agree to machine precision on every case.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N] [--batch B]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from eegmatch import _kernels as K

# (name, batch_scale, c_in, c_out, h, w, kernel, stride, padding)
# batch is multiplied by --batch: patch stages see batch*T*F images of one
# channel; multi-scale branches see batch*T*F token grids of D channels.
CASES = (
    ("patch stage 1 (32x32)", 30, 1, 16, 32, 32, 3, 2, 1),
    ("patch stage 2 (16x16)", 30, 16, 32, 16, 16, 3, 2, 1),
    ("patch stage 3 (8x8)", 30, 32, 64, 8, 8, 3, 2, 1),
    ("patch stage 4 (4x4)", 30, 64, 64, 4, 4, 3, 1, 1),
    ("multiscale 3x3 (4x4 tokens)", 30, 64, 64, 4, 4, 3, 1, 1),
    ("multiscale 5x5 (4x4 tokens)", 30, 64, 64, 4, 4, 5, 1, 2),
    ("toy patch stage 1 (16x16)", 12, 1, 8, 16, 16, 3, 2, 1),
)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_case(case_index, b, c_in, c_out, h, w, k, stride, padding, repeats):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([0, case_index])))
    x = rng.standard_normal((b, c_in, h, w))
    wgt = rng.standard_normal((c_out, c_in, k, k))
    oh = K.conv_out_size(h, k, stride, padding)
    ow = K.conv_out_size(w, k, stride, padding)
    go = rng.standard_normal((b, c_out, oh, ow))

    results = {}
    outputs = {}
    for backend in K.available_backends():
        prev = K.set_backend(backend)
        try:
            fwd = _median_time(lambda: K.conv2d_forward(x, wgt, stride, padding), repeats)
            bwd_in = _median_time(
                lambda: K.conv2d_backward_input(go, wgt, x.shape, stride, padding), repeats)
            bwd_k = _median_time(
                lambda: K.conv2d_backward_kernel(go, x, k, stride, padding), repeats)
            outputs[backend] = (
                K.conv2d_forward(x, wgt, stride, padding),
                K.conv2d_backward_input(go, wgt, x.shape, stride, padding),
                K.conv2d_backward_kernel(go, x, k, stride, padding),
            )
            results[backend] = (fwd, bwd_in, bwd_k)
        finally:
            K.set_backend(prev)

    max_diff = 0.0
    if len(outputs) == 2:
        a, b_ = outputs["numpy"], outputs["cython"]
        max_diff = max(np.abs(x1 - x2).max() for x1, x2 in zip(a, b_))
    return results, max_diff


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions per case (median reported)")
    parser.add_argument("--batch", type=int, default=8,
                        help="batch size multiplier (images = batch x scale)")
    args = parser.parse_args()

    backends = K.available_backends()
    print(f"available backends: {', '.join(backends)} (active: {K.active_backend()})")
    if "cython" not in backends:
        print("note: compiled backend unavailable; showing numpy only")

    header = f"{'case':32s} {'pass':16s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}{'max|diff|':>12s}"
    print(header)
    print("-" * len(header))
    for idx, (name, scale, c_in, c_out, h, w, k, stride, padding) in enumerate(CASES):
        b = args.batch * scale
        results, max_diff = bench_case(idx, b, c_in, c_out, h, w, k,
                                       stride, padding, args.repeats)
        for i, pass_name in enumerate(("forward", "backward_input", "backward_kernel")):
            row = f"{name if i == 0 else '':32s} {pass_name:16s}"
            for backend in backends:
                row += f"{results[backend][i] * 1e3:10.2f} ms"
            if len(backends) == 2:
                ratio = results["numpy"][i] / results["cython"][i]
                row += f"{ratio:9.2f}x"
                row += f"{max_diff:12.2e}" if i == 0 else f"{'':12s}"
            print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
