"""Compare the compiled convolution kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Shapes cover the encoder/decoder stages at the synthetic 16^3 grid and the
first stages at the full 53x63x52 grid.  Times are per call, best of
``--repeat``; GMAC/s counts multiply-accumulates of the forward pass.
"""
import argparse
import json
import time

import numpy as np

from voxvae.tensor import kernels

# (label, batch, c_in, c_out, spatial, stride)
CASES = [
    ("enc1 16^3", 16, 1, 4, (16, 16, 16), 2),
    ("enc2 8^3", 16, 4, 8, (8, 8, 8), 2),
    ("dec 16^3 s1", 16, 4, 4, (16, 16, 16), 1),
    ("dec 8^3 s1", 16, 8, 8, (8, 8, 8), 1),
    ("enc1 full", 4, 1, 16, (53, 63, 52), 2),
    ("dec full s1", 2, 16, 16, (53, 63, 52), 1),
]


def _out_shape(spatial, stride):
    return tuple((d + 2 - 3) // stride + 1 for d in spatial)


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_case(case, repeat, rng):
    label, n, cin, cout, spatial, stride = case
    x = rng.standard_normal((n, cin) + spatial).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    w = rng.standard_normal((cout, cin, 3, 3, 3)).astype(np.float32)
    out_shape = _out_shape(spatial, stride)
    dout = rng.standard_normal((n, cout) + out_shape).astype(np.float32)
    macs = n * cout * cin * 27 * int(np.prod(out_shape))
    row = {"case": label, "macs": macs}
    for name in ("numpy", "compiled"):
        if name == "compiled" and not kernels.compiled_available():
            continue
        kernels.use_backend(name)
        row[f"{name}_fwd"] = _time(lambda: kernels.conv3d_forward(xp, w, stride, out_shape), repeat)
        row[f"{name}_bwd_in"] = _time(lambda: kernels.conv3d_backward_input(dout, w, stride, xp.shape), repeat)
        row[f"{name}_bwd_w"] = _time(lambda: kernels.conv3d_backward_weight(xp, dout, stride, 3), repeat)
    return row


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="write raw timings here")
    parser.add_argument("--quick", action="store_true", help="skip the full-resolution cases")
    args = parser.parse_args(argv)
    original = kernels.backend()
    rng = np.random.default_rng(0)
    cases = [c for c in CASES if not (args.quick and "full" in c[0])]
    rows = []
    try:
        for case in cases:
            rows.append(run_case(case, args.repeat, rng))
    finally:
        kernels.use_backend(original)
    print(f"{'case':<14}{'op':<8}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}{'GMAC/s':>8}")
    for row in rows:
        for op in ("fwd", "bwd_in", "bwd_w"):
            t_np = row[f"numpy_{op}"]
            t_c = row.get(f"compiled_{op}")
            if t_c is None:
                print(f"{row['case']:<14}{op:<8}{t_np * 1e3:>10.2f}{'n/a':>13}")
                continue
            print(f"{row['case']:<14}{op:<8}{t_np * 1e3:>10.2f}{t_c * 1e3:>13.2f}"
                  f"{t_np / t_c:>9.2f}{row['macs'] / t_c / 1e9:>8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
