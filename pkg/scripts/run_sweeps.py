#!/usr/bin/env python3
"""Reproduce the sweep experiments: power budget, accuracy knob, user count.

Writes the plot-ready CSVs (sweep_pmax.csv, sweep_zeta.csv, sweep_users.csv)
into the output directory via the experiment runner.

Usage: python scripts/run_sweeps.py --out out/sweeps [--threads 4]
"""

import argparse

from uavicl import harness


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=str(harness.paper_scenario_path()))
    ap.add_argument("--out", default="out/sweeps")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--skip-users", action="store_true", help="skip the slow user-count sweep")
    args = ap.parse_args()

    kinds = ["sweep_pmax", "sweep_zeta"] + ([] if args.skip_users else ["sweep_users"])
    for kind in kinds:
        spec = harness.ExperimentSpec(
            kind=kind,
            scenario_path=args.scenario,
            output_dir=args.out,
            seed=args.seed,
            threads=args.threads,
        )
        print(f"running {kind} ...")
        for rec in harness.run_experiment(spec):
            print(" ", rec.summary)


if __name__ == "__main__":
    main()
