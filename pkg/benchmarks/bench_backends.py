"""Compare the numba and numpy kernel backends on training-shaped work.

Run:  python3 benchmarks/bench_backends.py [--repeats N] [--batch B]

Times each hot kernel on the tensor shapes a depth-3, base-8 network
sees on 64x64 slices, plus the first numba call so compilation cost is
visible.  Both backends compute identical values (checked here to
float64 round-off); the table reports median wall time per call.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from zoneseg.kernels import numba_kernels, numpy_kernels


def _time_call(fn, args, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(batch: int):
    rng = np.random.default_rng(0)

    def conv_case(n, ci, co, hw, k, pad):
        x = rng.standard_normal((n, ci, hw, hw))
        w = rng.standard_normal((co, ci, k, k))
        y_hw = hw + 2 * pad - k + 1
        gy = rng.standard_normal((n, co, y_hw, y_hw))
        return x, w, gy, pad

    cases = []
    for name, (ci, co, hw) in (
        ("enc0", (8, 8, 64)),
        ("enc2", (32, 32, 16)),
        ("bottleneck", (32, 64, 8)),
    ):
        x, w, gy, pad = conv_case(batch, ci, co, hw, 3, 1)
        cases.append((f"conv2d_forward {name} {ci}->{co}@{hw}", "conv2d_forward", (x, w, 1, pad)))
        cases.append((f"conv2d_input_grad {name}", "conv2d_input_grad", (gy, w, 1, pad, hw, hw)))
        cases.append((f"conv2d_weight_grad {name}", "conv2d_weight_grad", (x, gy, 1, pad, 3, 3)))

    xt = rng.standard_normal((batch, 64, 8, 8))
    wt = rng.standard_normal((64, 32, 2, 2))
    gyt = rng.standard_normal((batch, 32, 16, 16))
    cases.append(("tconv2d_forward up2 64->32@8", "tconv2d_forward", (xt, wt, 2)))
    cases.append(("tconv2d_input_grad up2", "tconv2d_input_grad", (gyt, wt, 2)))
    cases.append(("tconv2d_weight_grad up2", "tconv2d_weight_grad", (xt, gyt, 2, 2, 2)))

    xp = rng.standard_normal((batch, 8, 64, 64))
    cases.append(("maxpool2x2_forward 8@64", "maxpool2x2_forward", (xp,)))
    _, idx = numpy_kernels.maxpool2x2_forward(xp)
    gp = rng.standard_normal((batch, 8, 32, 32))
    cases.append(("maxpool2x2_backward 8@64", "maxpool2x2_backward", (gp, idx, 64, 64)))
    return cases


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--batch", type=int, default=5)
    args = parser.parse_args()

    cases = _cases(args.batch)

    # First-call cost (includes jit compilation unless cached on disk).
    t0 = time.perf_counter()
    first = cases[0]
    getattr(numba_kernels, first[1])(*first[2])
    print(f"numba first call ({first[0]}): {time.perf_counter() - t0:.3f}s")
    print()

    header = f"{'kernel @ shape':44s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, fn_name, call_args in cases:
        np_fn = getattr(numpy_kernels, fn_name)
        nb_fn = getattr(numba_kernels, fn_name)
        ref = np_fn(*call_args)
        out = nb_fn(*call_args)
        ref0 = ref[0] if isinstance(ref, tuple) else ref
        out0 = out[0] if isinstance(out, tuple) else out
        err = float(np.max(np.abs(ref0 - out0)))
        if err > 1e-9 * max(1.0, float(np.max(np.abs(ref0)))):
            raise AssertionError(f"{label}: backends disagree by {err}")
        t_np = _time_call(np_fn, call_args, args.repeats)
        t_nb = _time_call(nb_fn, call_args, args.repeats)
        print(f"{label:44s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
