"""Compare the compiled and numpy kernel backends on dense-layer shapes
typical of the ring and MNIST presets.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from distgan.kernels import backends

SHAPES = [
    # (batch, in, out)
    (256, 2, 32),
    (256, 32, 32),
    (256, 32, 1),
    (64, 784, 256),
    (64, 256, 256),
]


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = backends()
    rng = np.random.default_rng(0)
    names = sorted(impls)
    print(f"{'shape':<18}" + "".join(f"{n + ' fwd':>14}{n + ' bwd':>14}" for n in names) + f"{'identical':>11}")
    for n, i, o in SHAPES:
        x = rng.standard_normal((n, i))
        w = rng.standard_normal((i, o))
        b = rng.standard_normal(o)
        g = rng.standard_normal((n, o))
        row, outs = f"{f'{n}x{i}->{o}':<18}", []
        for name in names:
            k = impls[name]
            tf = best_of(lambda: k.affine_forward(x, w, b), args.repeat)
            tb = best_of(lambda: k.affine_backward(x, w, g, True), args.repeat)
            row += f"{tf * 1e3:>12.3f}ms{tb * 1e3:>12.3f}ms"
            outs.append((k.affine_forward(x, w, b),) + tuple(k.affine_backward(x, w, g, True)))
        same = all(np.array_equal(a, c) for a, c in zip(outs[0], outs[-1]))
        print(row + f"{str(same):>11}")


if __name__ == "__main__":
    main()
