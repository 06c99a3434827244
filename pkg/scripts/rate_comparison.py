#!/usr/bin/env python3
"""Valid-projection-rate comparison of the two range-view variants.

Sweeps dropout levels on synthetic sweeps and prints the rate of the
elevation-binned projection against scan unfolding, optionally also for
a real scan file (pass --scan path/to/scan.bin).

Usage: python scripts/rate_comparison.py [--scan file.bin] [--seeds 3]
"""

import argparse

from crossview.ingest import SynthConfig, load_scan, synth_scan
from crossview.rv import KITTI_RV, project_rv_original, project_rv_scanunfold, valid_projection_rate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scan", help="optional real scan (N x 4 float32 .bin)")
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    print(f"{'source':<28} {'original':>9} {'unfolded':>9}")
    for dropout in (0.0, 0.05, 0.15, 0.3):
        orig = unf = 0.0
        for seed in range(args.seeds):
            cloud = synth_scan(SynthConfig(dropout=dropout), seed=seed)
            orig += valid_projection_rate(project_rv_original(cloud, KITTI_RV))
            unf += valid_projection_rate(project_rv_scanunfold(cloud, KITTI_RV))
        print(f"synthetic dropout={dropout:<6} {orig / args.seeds:>9.4f} {unf / args.seeds:>9.4f}")

    if args.scan:
        cloud = load_scan(args.scan)
        orig = valid_projection_rate(project_rv_original(cloud, KITTI_RV))
        unf = valid_projection_rate(project_rv_scanunfold(cloud, KITTI_RV))
        print(f"{args.scan:<28} {orig:>9.4f} {unf:>9.4f}")


if __name__ == "__main__":
    main()
