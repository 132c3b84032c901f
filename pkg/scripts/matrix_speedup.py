"""Cached delay matrices against per-frame rebuilds on the demo reconstruction grid."""

import argparse
from pathlib import Path

from updsim.experiments import matrix_speedup
from updsim.pipeline import RunConfig

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "demo.json"))
    ap.add_argument("--frames", type=int, default=20)
    args = ap.parse_args()
    res = matrix_speedup(RunConfig.load(args.config), args.frames)
    for k, v in res.items():
        print(f"{k:16s} {v}")


if __name__ == "__main__":
    main()
