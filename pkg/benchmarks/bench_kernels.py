"""Benchmark the compiled kernel backend against the pure-Python fallback.

Times the per-element hot kernels at two sizes plus one full training epoch
per backend. Matrix products run through BLAS in both backends, so the
end-to-end gap narrows as the model grows and BLAS dominates.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from deepmf import data, kernels
from deepmf import model as M
from deepmf import train as T


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(size, rng):
    x = rng.normal(size=size)
    g = rng.normal(size=size)
    interior = np.array([-0.75, -0.25, 0.25, 0.75])
    knots = np.array([-1.25, -0.5, 0.0, 0.5, 1.25])
    levels = np.linspace(-1.0, 1.0, 5)
    bounds = np.array([-1.25, -0.75, -0.25, 0.25, 0.75, 1.25])
    m = np.zeros(size)
    v = np.zeros(size)

    def softq(backend):
        y, sig, seg = backend.soft_quantize_forward(x, interior, knots,
                                                    levels[:-1], 0.5, 20.0)
        backend.soft_quantize_backward(g, sig, seg, 0.5, 20.0, 4)

    return [
        ("selu fwd+bwd", lambda b: (b.selu_forward(x), b.selu_backward(x, g))),
        ("logistic", lambda b: b.logistic(x, 10.0, 0.1)),
        ("soft quantize fwd+bwd", softq),
        ("hard quantize", lambda b: b.hard_quantize(x, bounds, levels)),
        ("adam step", lambda b: b.adam_step(x, g, m, v, 3, 1e-3, 0.9, 0.999,
                                            1e-8)),
    ]


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for size in (10_000, 1_000_000):
        for name, case in kernel_cases(size, rng):
            row = {"case": f"{name} (n={size:,})"}
            for backend_name in kernels.available():
                backend = kernels.get(backend_name)
                row[backend_name] = best_of(lambda: case(backend), repeats)
            rows.append(row)
    return rows


def bench_epoch(repeats):
    rng = np.random.default_rng(1)
    n, m, density = 120, 90, 0.4
    idx = rng.choice(n * m, size=int(density * n * m), replace=False)
    r, c = np.divmod(np.sort(idx), m)
    vals = rng.integers(1, 6, size=len(idx)).astype(float)
    matrix = data.RatingMatrix(n, m, r, c, vals, 1, 5)
    splits = data.random_split(matrix, (0.9, 0.05, 0.05), seed=1)
    task = data.build_task(matrix, splits)
    cfg = T.TrainConfig(mode="dmfd", gamma1=1e-4, gamma2=0.5,
                        lambda_start=4.0, lambda_end=64.0, batch_size=128,
                        max_epochs=3, early_stop_patience=3, seed=1)
    rows = []
    row = {"case": "dmfd training, 3 epochs (120x90, 40% observed)"}
    for backend_name in kernels.available():
        with kernels.use(backend_name):
            def fit():
                model = M.init(M.BranchConfig(m, (32,), 8),
                               M.BranchConfig(n, (32,), 8), 1)
                T.train(model, task, cfg)
            row[backend_name] = best_of(fit, repeats)
    rows.append(row)
    return rows


def render(rows):
    names = list(kernels.available())
    width = max(len(r["case"]) for r in rows) + 2
    header = "case".ljust(width) + "".join(f"{n:>14}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for r in rows:
        line = r["case"].ljust(width)
        for n in names:
            line += f"{r[n] * 1e3:>12.3f}ms"
        if len(names) == 2:
            line += f"{r[names[1]] / r[names[0]]:>9.2f}x"
        print(line)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"backends available: {', '.join(kernels.available())}")
    if len(kernels.available()) < 2:
        print("compiled backend not built; timing the fallback only")
    rows = bench_kernels(args.repeats) + bench_epoch(max(args.repeats // 2, 1))
    render(rows)


if __name__ == "__main__":
    main()
