"""Kendall's tau of ITD and AID against brute-force retraining on LQGAN.

    python3 scripts/tau_table.py --Ts 10 100 1000 --Ms 10 100 1000 --targets 100
"""

import argparse
import time

import numpy as np

from ganinfluence import influence as inf
from ganinfluence import metrics as mt
from ganinfluence import models, training
from ganinfluence.models import Dataset, GameSpec
from ganinfluence.verify import kendall_tau


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--Ts", type=int, nargs="+", default=[10, 100, 1000, 10000])
    ap.add_argument("--Ms", type=int, nargs="+", default=[10, 100, 1000, 10000])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--targets", type=int, default=100)
    ap.add_argument("--eta", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--shuffles", type=int, default=0, help="permutation draws for p-values")
    args = ap.parse_args()

    X, _ = models.sample_distribution("normal", {"mean": 1.0, "std": 1.0}, args.n, 1)
    data = Dataset(X, models.latents(args.n, 1, 2))
    val = models.sample_distribution("normal", {"mean": 1.0, "std": 1.0}, args.n, 3)[0]
    spec, cfg = GameSpec(), mt.MetricConfig()
    targets = np.arange(args.targets)

    print(f"{'T':>6} {'estimator':>10} {'tau':>8} {'p':>9} {'sec':>6}")
    for T in args.Ts:
        t0 = time.perf_counter()
        traj = training.run_agd(spec, data, T, args.eta, args.seed)
        ge = mt.grad_metric(spec, traj.final[:2], cfg, val)
        truth, _ = mt.true_influence(traj, data, cfg, val, targets)
        rows = [("itd", inf.itd_eigem(traj, data, ge, targets).scores)]
        for M in args.Ms:
            rows.append((f"aid M={M}", inf.aid_eigem(traj.final, spec, data, ge, targets, M=M, eta=args.eta).scores))
        for name, s in rows:
            k = kendall_tau(s, truth, args.shuffles)
            print(f"{T:>6} {name:>10} {k.tau:>8.4f} {k.p_value:>9.2e} {time.perf_counter() - t0:>6.1f}")


if __name__ == "__main__":
    main()
