"""In-vessel scatterer share on the 4 x 1.5 x 5 cm phantom."""

import argparse

from updsim.experiments import full_scale_share


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--share", type=float, default=0.0016, help="tube volume fraction")
    args = ap.parse_args()
    for k, v in full_scale_share(args.seed, args.share).items():
        print(f"{k:16s} {v}")


if __name__ == "__main__":
    main()
