"""Loss-subset ablation on the toy setup: one shared init, one CSV row per subset."""

import argparse
import csv
import sys

from twinembed.presets import toy_setup
from twinembed.train import ablate, parse_subsets


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--subsets", default="nce,icnce,ictm;nce;nce,icnce;nce,ictm", help="';'-separated loss subsets")
    p.add_argument("--steps", type=int, default=200, help="training steps per subset")
    p.add_argument("--seed", type=int, default=0, help="shared init and training seed")
    p.add_argument("--out", default="ablation.csv", help="CSV path")
    args = p.parse_args(argv)
    toy = toy_setup(steps=args.steps, seed=args.seed)
    rows = ablate(parse_subsets(args.subsets), toy.sentences, toy.vocab, toy.sts_dev, toy.model_cfg,
                  toy.cael_k, toy.train_cfg, args.seed, toy.probe)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss_mask", "best_spearman", "final_spearman", "modulus_mismatch"])
        for r in rows:
            w.writerow(["+".join(r.loss_mask), r.best_spearman, r.final_spearman, r.modulus_mismatch])
            print(f"{'+'.join(r.loss_mask):16s} best {r.best_spearman:.4f} final {r.final_spearman:.4f} "
                  f"mismatch {r.modulus_mismatch:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
