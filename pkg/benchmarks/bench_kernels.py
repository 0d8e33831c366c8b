"""Time the compiled kernels against the numpy fallback and confirm identical output.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from avtrack import backend


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    def conv1d(B, T, cin, cout):
        x = rng.standard_normal((B, T, cin))
        w = rng.standard_normal((5, cin, cout))
        b = rng.standard_normal(cout)
        return (f"conv1d B={B} T={T} {cin}->{cout}", "conv1d_forward",
                lambda: (x, w, b, np.empty((B, T, cout))), 3)

    def conv3d(B, T, S, cin, cout, stride):
        x = rng.standard_normal((B, T, S, S, cin))
        w = rng.standard_normal((3, 3, 3, cin, cout))
        b = rng.standard_normal(cout)
        So = (S - 3) // stride + 1
        return (f"conv3d B={B} T={T} {S}x{S} {cin}->{cout} s={stride}", "conv3d_forward",
                lambda: (x, w, b, stride, np.empty((B, T, So, So, cout))), 4)

    def bilinear(B, T, N, D):
        q = rng.standard_normal((B, T, D))
        wt = rng.standard_normal((D, D))
        v = rng.standard_normal((N, T, D))
        return (f"bilinear B={B} N={N} T={T} D={D}", "bilinear_forward",
                lambda: (q, wt, v, np.empty((N, T, D)), np.empty((B, T, N))), 4)

    def adam(n):
        value = rng.standard_normal(n)
        g = rng.standard_normal(n)
        return (f"adam n={n}", "adam_update",
                lambda: (value.copy(), g, np.zeros(n), np.zeros(n),
                         1e-3, 0.9, 0.98, 0.1, 0.02, 1e-8), 0)

    return [conv1d(8, 20, 240, 256), conv1d(8, 20, 512, 512), conv3d(1, 4, 16, 3, 16, 2),
            bilinear(8, 20, 8, 512), adam(1_000_000)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if backend.compiled is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':44s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  identical")
    for label, fname, make, out_pos in cases(rng):
        row = {}
        outs = {}
        for mod in backend.available():
            fn = getattr(mod, fname)
            inputs = make()
            row[mod.NAME] = _best(lambda: fn(*inputs), args.repeat) * 1e3
            outs[mod.NAME] = inputs[out_pos].copy()
        py = row["python"]
        comp = row.get("compiled")
        same = "n/a" if comp is None else str(all(np.array_equal(outs["python"], o) for o in outs.values()))
        comp_s = "-" if comp is None else f"{comp:12.2f}"
        speed = "-" if comp is None else f"{py / comp:8.1f}"
        print(f"{label:44s} {py:10.2f} {comp_s:>12s} {speed:>8s}  {same}")


if __name__ == "__main__":
    main()
