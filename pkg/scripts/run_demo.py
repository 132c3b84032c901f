"""Run the desk-scale demo and print the stage timings and image metrics."""

import argparse
import json
import logging
from pathlib import Path

from updsim.pipeline import RunConfig, run

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "demo.json"))
    ap.add_argument("--out", help="output directory (default: the config's)")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = RunConfig.load(args.config)
    result = run(cfg, out=args.out, force=args.force)
    out = Path(args.out or cfg.out)
    for stage, m in result.manifests.items():
        print(f"{stage:10s} {'ran' if stage in result.ran else 'cached':6s} {m.seconds:7.1f} s")
    print(json.loads((out / "metrics" / "metrics.json").read_text()))


if __name__ == "__main__":
    main()
