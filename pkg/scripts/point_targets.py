"""Single-scatterer localisation error after DAS reconstruction, in voxels."""

import argparse

import numpy as np

from updsim.experiments import point_targets


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--targets", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = point_targets(args.targets, args.seed)
    np.set_printoptions(precision=3, suppress=True)
    for p, off, idx in zip(res["targets"] * 1e3, res["offset_voxels"], res["index_offset"]):
        print(f"target (mm) {p}  offset (voxels) {off}  index offset {idx}")
    print("worst index offset", int(res["index_offset"].max()))


if __name__ == "__main__":
    main()
