"""Analytic inference cost (GMAC) and score per GMAC for one, two and six towers."""

import argparse
import sys

from twinembed.encoder import EncoderConfig
from twinembed.train import macs_and_eta


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--n-layers", type=int, default=12)
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--n-heads", type=int, default=12)
    p.add_argument("--d-ffn", type=int, default=3072)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--score", type=float, default=79.70, help="STS score used for the efficiency column")
    args = p.parse_args(argv)
    cfg = EncoderConfig(n_layers=args.n_layers, d=args.d, n_heads=args.n_heads, d_ffn=args.d_ffn,
                        vocab_size=30522, max_seq_len=max(args.seq_len, 3))
    print("towers,gmac,score_per_gmac")
    for towers in (1, 2, 6):
        gmac, eta = macs_and_eta(cfg, towers, args.seq_len, args.score)
        print(f"{towers},{gmac:.4f},{eta:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
