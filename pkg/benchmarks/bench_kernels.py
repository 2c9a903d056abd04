"""Time the compiled and numpy kernels on the shapes the simulator and GP use.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from pstune import kernels
from pstune.pssim import WorkloadSpec, generate_dataset


def cases():
    rng = np.random.default_rng(0)
    for kind in ("quadratic", "logistic_regression_l2", "linear_svm_l2"):
        l2 = 0.0 if kind == "quadratic" else 1e-3
        ds = generate_dataset(WorkloadSpec(kind=kind, l2_strength=l2))
        w = rng.standard_normal(ds.dim)
        idx = rng.choice(ds.n, 16, replace=False).astype(np.int64)
        grad = np.empty(ds.dim)
        yield f"loss_grad[{kind}] m=16", lambda k, ds=ds, w=w, idx=idx, g=grad, l2=l2: k.loss_grad(
            ds.kind_code, ds.X, ds.y, idx, w, l2, g)
        yield f"example_losses[{kind}] n={ds.n}", lambda k, ds=ds, w=w: k.example_losses(
            ds.kind_code, ds.X, ds.y, w)
    for n in (10, 100):
        A = rng.random((200, 3))
        B = rng.random((n, 3))
        inv = np.array([2.0, 1.0, 0.5])
        yield f"matern52_gram 200x{n}", lambda k, A=A, B=B, inv=inv: k.matern52_gram(A, B, inv, 1.0)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=2000)
    args = parser.parse_args()
    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy backend only")
    print(f"{'kernel':44s} " + " ".join(f"{b + ' us':>12s}" for b in backends) + f" {'speedup':>8s}")
    for name, fn in cases():
        us = {}
        for b, mod in backends.items():
            t = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3))
            us[b] = 1e6 * t / args.repeat
        speed = f"{us['python'] / us['cython']:8.1f}" if "cython" in us else ""
        print(f"{name:44s} " + " ".join(f"{us[b]:12.2f}" for b in backends) + f" {speed}")


if __name__ == "__main__":
    main()
