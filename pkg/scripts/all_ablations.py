"""Run every ablation grid on a shared stage cache.

Usage: python scripts/all_ablations.py OUT_DIR [--seeds 0,1,2] [--only delta,epochs]

Tables land in ``OUT_DIR/tables``. Stages shared between grids are
trained once thanks to the cache in ``OUT_DIR/cache``.
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from agnostic_ssl.ablation import ABLATIONS, run_ablation, write_table
from agnostic_ssl.experiment import ExperimentConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--only", help="comma list of ablation names")
    p.add_argument("--config")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    base = replace(base, out=args.out)
    seeds = [int(s) for s in args.seeds.split(",")]
    names = args.only.split(",") if args.only else list(ABLATIONS)
    for name in names:
        t0 = time.perf_counter()
        table = run_ablation(name, base, seeds, cache=Path(args.out) / "cache")
        write_table(table, Path(args.out) / "tables")
        print(f"{name} ({(time.perf_counter() - t0) / 60:.1f} min)")
        print(table.format())
        print()


if __name__ == "__main__":
    main()
