"""Desk-scale benchmark: timed full pipelines plus the directional ablations.

One call produces everything the directional checks need. Results are
written as JSON next to a shared stage cache, so a second call with the
same directory only reloads them.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .ablation import AblationTable, run_ablation, write_table
from .experiment import ExperimentConfig
from .pipeline import run_pipeline

log = logging.getLogger("agnostic_ssl")

DESK_ABLATIONS = ("warmup-data", "quality-gap", "unlabeled-scale")


def run_desk(
    out: Union[str, Path],
    seeds: Sequence[int] = (0, 1, 2),
    base: Optional[ExperimentConfig] = None,
    ablations: Sequence[str] = DESK_ABLATIONS,
) -> dict:
    """Run (or reload) the desk-scale benchmark under ``out``.

    For each seed the full pipeline runs first on a cold cache and is
    timed; the ablations then reuse its stages through the shared cache.
    Returns ``{"pipeline": {seed: {"seconds", "report"}}, "tables": {name: dict}}``.
    """
    out = Path(out)
    summary = out / "desk.json"
    base = base or ExperimentConfig()
    key = {"base_digest": base.digest(), "seeds": list(seeds), "ablations": list(ablations)}
    if summary.exists():
        saved = json.loads(summary.read_text())
        if saved.get("key") == key:
            return saved
    cache = out / "cache"
    pipeline = {}
    for seed in seeds:
        t0 = time.perf_counter()
        report = run_pipeline(replace(base, seed=seed, out=str(out / "pipeline" / f"seed{seed}")), cache)
        pipeline[str(seed)] = {"seconds": time.perf_counter() - t0, "report": report}
        log.info("seed %d pipeline: %.0f s", seed, pipeline[str(seed)]["seconds"])
    tables = {}
    for name in ablations:
        table = run_ablation(name, replace(base, out=str(out)), seeds, cache)
        write_table(table, out / "tables")
        tables[name] = table.to_dict()
    result = {"key": key, "pipeline": pipeline, "tables": tables}
    summary.write_text(json.dumps(result, indent=2))
    return result
