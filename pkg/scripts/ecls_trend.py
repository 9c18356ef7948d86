"""Mean E_CLS against dev Spearman over checkpoints of one toy training run."""

import argparse
import sys

from twinembed.metrics import ecls_trend
from twinembed.presets import toy_setup
from twinembed.train import train


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--every", type=int, default=50, help="checkpoint interval in steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="ecls_trend.csv", help="CSV path")
    args = p.parse_args(argv)
    toy = toy_setup(steps=args.steps, seed=args.seed)
    result = train(toy.init_model(args.seed), toy.sentences, toy.vocab, toy.sts_dev, toy.train_cfg,
                   snapshot_every=args.every)
    report = ecls_trend([(f"step{s}", m) for s, m in result.snapshots], toy.vocab, toy.sts_dev)
    with open(args.out, "w") as fh:
        fh.write(report.to_csv())
    for cid, e, s in report.rows:
        print(f"{cid:>8s}  E_CLS {e:.4f}  spearman {s:.4f}")
    print(f"rank correlation {report.correlation}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
