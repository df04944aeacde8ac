"""Greedy slice selection against the exhaustive-subset optimum on 6 candidate stations."""
import argparse
import logging

from archfit.studies import planner_check, sample_cohort, training_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-shapes", type=int, default=2)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    model, _ = training_model()
    res = planner_check(model, sample_cohort(model, args.n_shapes, args.seed))
    for step in res.steps:
        print(f"iteration {step.iteration}: greedy {step.greedy} oracle {step.oracle} "
              f"agrees {step.agrees}")
    print("dice path", " ".join(f"{d:.4f}" for d in res.dice_path))
    print(f"largest dice drop {res.max_dice_drop():.4f}")


if __name__ == "__main__":
    main()
