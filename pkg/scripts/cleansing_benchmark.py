"""Contaminated-mixture cleansing grid: scorers x retraining x removal rates.

Runs with both removal conventions unless ``--renormalize`` picks one:
``1`` divides the remaining weights by their sum, ``0`` keeps the original
``1/|X|`` normalizer.

    python3 scripts/cleansing_benchmark.py --seeds 5 --out runs/cleanse
"""

import argparse
from pathlib import Path

import numpy as np
from scipy import stats

from ganinfluence import cleansing as cl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--T", type=int, default=10000)
    ap.add_argument("--rates", type=float, nargs="+", default=[0.01, 0.02, 0.05, 0.10, 0.20, 0.50])
    ap.add_argument("--scorers", nargs="+", default=["itd", "aid", "disc_itd", "disc_aid", "random"])
    ap.add_argument("--renormalize", type=int, choices=[0, 1], default=None)
    ap.add_argument("--one-epoch", action="store_true", help="also run one-epoch retraining for each scorer")
    ap.add_argument("--out", default="runs/cleanse")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conventions = [bool(args.renormalize)] if args.renormalize is not None else [True, False]
    strategies = [cl.FULL, cl.ONE_EPOCH] if args.one_epoch else [cl.FULL]
    for renorm in conventions:
        plans = [cl.CleansingPlan(scorer=s, retrain=r, removal_rates=tuple(args.rates), T=args.T,
                                  seeds=tuple(range(args.seeds)), renormalize=renorm)
                 for s in args.scorers for r in strategies]
        res = cl.run_benchmark_many(plans, progress=lambda seed, p, cells: print(
            f"  seed {seed} {p.scorer}/{p.retrain}: " + " ".join(f"{c.improvement:+.4f}" for c in cells)))
        print(f"\nrenormalize={renorm}")
        print(f"{'scorer':>10} {'retrain':>9} " + " ".join(f"{r:>16}" for r in args.rates))
        rnd = res.get(("random", cl.FULL))
        for (scorer, retrain), r in res.items():
            cells = []
            for rate in args.rates:
                imp = r.improvements(rate)
                mark = ""
                if rnd is not None and scorer != "random" and imp.size > 1:
                    p = stats.ttest_rel(imp, rnd.improvements(rate), alternative="greater").pvalue
                    mark = "*" if p < 0.05 else ""
                cells.append(f"{imp.mean():+.4f}({imp.std(ddof=1):.3f}){mark}".rjust(16))
            print(f"{scorer:>10} {retrain:>9} " + " ".join(cells))
            tag = f"{scorer}_{retrain}_renorm{int(renorm)}"
            r.to_csv(out / f"{tag}.csv")
            r.to_json(out / f"{tag}.json")
    print("\n* one-sided paired t-test against random, p < 0.05")


if __name__ == "__main__":
    main()
