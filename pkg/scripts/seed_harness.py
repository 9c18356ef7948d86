"""Best dev Spearman of the toy setup over several seeds, with mean and variance."""

import argparse
import csv
import sys

from twinembed.presets import toy_setup
from twinembed.train import seed_harness


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seeds", default="1,2,3,4,5", help="comma-separated seeds")
    p.add_argument("--steps", type=int, default=200, help="training steps per seed")
    p.add_argument("--out", default="seeds.csv", help="CSV path")
    args = p.parse_args(argv)
    seeds = [int(s) for s in args.seeds.split(",")]
    toy = toy_setup(steps=args.steps)
    summary = seed_harness(seeds, toy.sentences, toy.vocab, toy.sts_dev, toy.model_cfg, toy.cael_k, toy.train_cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "best_spearman"])
        w.writerows(zip(summary.seeds, summary.scores))
    print(f"mean {summary.mean:.4f} variance {summary.variance:.6f} over seeds {seeds}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
