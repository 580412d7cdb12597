#!/usr/bin/env python3
"""Run the desk-scale robustness study (trains everything, caches per seed).

Results land under artifacts/study/: per-seed model checkpoints, per-seed
measurement JSON, and an aggregated summary.json consumed by the
acceptance suite. Re-running skips seeds whose cache matches the config.
"""

import argparse
import json
import sys

from amcrobust.protocol import StudyConfig, run_study


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--out", default="artifacts/study")
    p.add_argument("--jobs", type=int, default=2, help="parallel seed workers")
    p.add_argument("--quick", action="store_true",
                   help="tiny smoke-scale run (not the acceptance protocol)")
    args = p.parse_args()

    seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.quick:
        cfg = StudyConfig(seeds=seeds, n_train=1000, n_test=200, epochs=4,
                          teacher_epochs=4)
    else:
        cfg = StudyConfig(seeds=seeds)
    summary = run_study(cfg, out_dir=args.out, jobs=args.jobs)

    print(json.dumps(
        {
            "seeds": summary["seeds"],
            "pgd@-10 accuracy by recipe": {
                kind: [r["accuracy"][kind]["pgd"]["-10"] for r in summary["records"]]
                for kind in ("nt", "at", "atard")
            },
            "smoothness by recipe": {
                kind: [r["smoothness"][kind] for r in summary["records"]]
                for kind in ("nt", "at", "atard")
            },
        },
        indent=2,
    ))
    return 0


if __name__ == "__main__":
    sys.exit(main())
