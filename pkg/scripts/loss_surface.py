"""Closed-form modulus-loss grid over (k, t) as CSV, plus its argmin."""

import argparse
import sys

import numpy as np

from twinembed.cli import loss_surface_rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--k-min", type=float, default=0.1)
    p.add_argument("--k-max", type=float, default=5.0)
    p.add_argument("--k-step", type=float, default=0.01)
    p.add_argument("--t-steps", type=int, default=201)
    p.add_argument("--out", default="loss_surface.csv", help="CSV path")
    args = p.parse_args(argv)
    rows = loss_surface_rows(args.k_min, args.k_max, args.k_step, args.t_steps)
    np.savetxt(args.out, rows, delimiter=",", header="k,t,value", comments="", fmt="%.17g")
    k, t, v = rows[int(np.argmin(rows[:, 2]))]
    print(f"{len(rows)} rows; minimum {v:.3e} at k={k:.2f}, t={t:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
