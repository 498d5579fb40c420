"""Jet order against noise: RMSE of jet n=1..4 on quadric patches over the benchmark noise levels."""

import numpy as np

from hsurf import desk
from hsurf.metrics import classical_estimator, run_benchmark
from hsurf.synthetic import BENCH_SIGMAS


def main():
    ests = {f"jet:{n}": classical_estimator(f"jet:{n}") for n in (1, 2, 3, 4)}
    ests["pca"] = classical_estimator("pca")
    test = [(f"sigma={s:g}", c) for s in BENCH_SIGMAS for c in desk.noisy_quadrics(sigma=s)]
    test += [("curved,sigma=0", c) for c in desk.curved_quadrics()]
    report = run_benchmark(ests, test, 64, queries_per_shape=120, seed=0)
    print(report.to_table(), end="")
    best = {c: min(report.methods, key=lambda m: report.entries[m, c].rmse) for c in report.corruptions}
    for c, m in best.items():
        print(f"best at {c}: {m}")


if __name__ == "__main__":
    np.seterr(all="ignore")
    main()
