"""Run the desk-scale benchmark and print its tables.

Usage: python scripts/desk_benchmark.py OUT_DIR [--seeds 0,1,2] [--config exp.ini]

Writes ``OUT_DIR/desk.json``, per-seed pipeline runs under ``OUT_DIR/pipeline``
and one table (json, txt, png) per ablation under ``OUT_DIR/tables``.
A second call with the same arguments reloads the saved results.
"""

import argparse
import logging

from agnostic_ssl.ablation import AblationTable
from agnostic_ssl.desk import DESK_ABLATIONS, run_desk
from agnostic_ssl.experiment import ExperimentConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--config", help="base experiment config (INI); defaults to the desk-scale defaults")
    p.add_argument("--ablations", default=",".join(DESK_ABLATIONS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_desk(args.out, seeds, base, args.ablations.split(","))
    for seed, run in result["pipeline"].items():
        print(f"seed {seed}: pipeline {run['seconds'] / 60:.1f} min, headline {run['report']['headline']}")
    for table in result["tables"].values():
        print()
        print(table["name"])
        print(AblationTable.from_dict(table).format())


if __name__ == "__main__":
    main()
