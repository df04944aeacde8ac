"""Radius error against the number of fitted slices, on sampled shapes."""
import argparse
import logging

from archfit.io import write_csv
from archfit.studies import sample_cohort, slice_sweep, sweep_subsets, training_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-shapes", type=int, default=5)
    ap.add_argument("--counts", default="2,3,4,5,6,7,8,9,10,11,12")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", default="slice_sweep.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    model, _ = training_model()
    shapes = sample_cohort(model, args.n_shapes, args.seed)
    subsets = sweep_subsets([int(c) for c in args.counts.split(",")])
    errs = slice_sweep(model, shapes, subsets)
    write_csv(args.out, [dict(n_slices=n, stations=" ".join(map(str, subsets[n])),
                              mean_abs_rel_err=e) for n, e in errs.items()])
    for n, e in errs.items():
        print(f"{n:2d} slices {subsets[n]}: {e:.5f}")


if __name__ == "__main__":
    main()
