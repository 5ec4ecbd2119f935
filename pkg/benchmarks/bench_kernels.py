"""Time each hot kernel on the compiled and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from writer_retrieval import kernels
from writer_retrieval.numerics import make_rng, round_robin_schedule
from writer_retrieval.training import pairwise_sq_dist


def cases():
    rng = make_rng(0)
    a = rng.standard_normal((120, 120))
    sym = a + a.T
    spd = a @ a.T + 10 * np.eye(120)
    rhs = rng.standard_normal(120)
    page = np.where(rng.random((600, 450)) < 0.2, 0, 255).astype(np.uint8)
    k, d = 100, 64
    c, w, b = rng.standard_normal((k, d)), rng.standard_normal((k, d)), rng.standard_normal(k)
    x = rng.standard_normal((64, d))
    emb, assign, norms = kernels.netvlad_forward(c, w, b, x)
    up = rng.standard_normal(emb.shape)
    dist = pairwise_sq_dist(rng.standard_normal((64, 16)))
    labels = np.repeat(np.arange(8), 8)
    sched = round_robin_schedule(120)
    return {
        "jacobi_eigh 120x120": lambda: kernels.jacobi_eigh(sym, sched, 100),
        "cholesky_solve 120x120": lambda: kernels.cholesky_solve(spd, rhs),
        "contour_mask 600x450": lambda: kernels.contour_mask(page, 128),
        "netvlad_forward 64x(100x64)": lambda: kernels.netvlad_forward(c, w, b, x),
        "netvlad_backward 64x(100x64)": lambda: kernels.netvlad_backward(c, w, b, x, assign, emb, norms, up),
        "mine_triplets B=64": lambda: kernels.mine_triplets(dist, labels, 0.1),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.available_backends()
    print(f"{'kernel':32s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for label, fn in cases().items():
        times = {}
        for name in backends:
            prev = kernels.use_backend(name)
            fn()
            times[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            kernels.use_backend(prev)
        row = f"{label:32s}" + "".join(f"{times[b] * 1e3:12.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"   {times['python'] / times['compiled']:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
