"""Cohort -> shape model -> greedy 6-slice plan -> fits of 30 held-out samples."""
import argparse
import logging

import numpy as np

from archfit.io import write_csv
from archfit.studies import closed_loop, training_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=30)
    ap.add_argument("--n-test", type=int, default=30)
    ap.add_argument("--n-select", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="closed_loop.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    model, _ = training_model(args.n_train)
    res = closed_loop(model, n_select=args.n_select, n_test=args.n_test, seed=args.seed,
                      jobs=args.jobs)
    write_csv(args.out, [dict(shape=i, **r.row()) for i, r in enumerate(res.reports)])
    dice = [r.dice for r in res.reports]
    print(f"selected stations: {res.selected}")
    print(f"dice {np.mean(dice):.4f} +- {np.std(dice):.4f}")
    print(f"chamfer {res.mean('chamfer'):.3f} mm  hausdorff {res.mean('hausdorff'):.3f} mm")
    print(f"planning {res.timings['plan']:.0f} s, fits {res.timings['fits']:.0f} s")


if __name__ == "__main__":
    main()
