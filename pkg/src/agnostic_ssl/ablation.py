"""Desk-scale ablation grids, each mirroring the row/column layout of one study."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from .detector import from_checkpoint
from .experiment import ExperimentConfig
from .pipeline import Experiment, evaluate_agnostic, evaluate_specific
from .trainer import INIT_ROWS, InitSpec

ABLATIONS = ("warmup-data", "epochs", "delta", "init-parts", "augmentation", "unlabeled-scale", "quality-gap")


@dataclass
class AblationTable:
    """Seed-averaged table; ``cells[row][column]`` holds one value per seed (or ``None``)."""

    name: str
    columns: list[str]
    row_labels: list[str] = field(default_factory=list)
    cells: list[dict] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def add(self, label: str, values: dict) -> None:
        if label not in self.row_labels:
            self.row_labels.append(label)
            self.cells.append({c: [] for c in self.columns})
        row = self.cells[self.row_labels.index(label)]
        for c in self.columns:
            row[c].append(values.get(c))

    def mean(self, row: str, column: str) -> Optional[float]:
        vals = self.cells[self.row_labels.index(row)][column]
        if not vals or any(v is None for v in vals):
            return None
        return math.fsum(vals) / len(vals)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": self.seeds,
            "columns": self.columns,
            "rows": [
                {"label": label, "mean": {c: self.mean(label, c) for c in self.columns}, "per_seed": cells}
                for label, cells in zip(self.row_labels, self.cells)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationTable":
        rows = d["rows"]
        return cls(d["name"], list(d["columns"]), [r["label"] for r in rows],
                   [{c: list(r["per_seed"][c]) for c in d["columns"]} for r in rows], list(d.get("seeds", [])))

    def format(self) -> str:
        width = max([len(r) for r in self.row_labels] + [8])
        head = " | ".join([f"{'':<{width}}"] + [f"{c:>9}" for c in self.columns])
        lines = [head, "-" * len(head)]
        for label in self.row_labels:
            vals = [self.mean(label, c) for c in self.columns]
            lines.append(" | ".join([f"{label:<{width}}"] + [f"{'-':>9}" if v is None else f"{v:9.2f}" for v in vals]))
        return "\n".join(lines)


def _ap(report) -> Optional[float]:
    return None if report.ap is None else 100.0 * report.ap


def _finetuned_metrics(exp: Experiment, ckpt) -> dict:
    m = evaluate_specific(from_checkpoint(ckpt), exp.splits.test, exp.cfg)
    return {
        "fin AP^det": _ap(m["ap_det"]),
        "fin AP^det50": None if m["ap_det"].ap50 is None else 100 * m["ap_det"].ap50,
        "fin AP^det75": None if m["ap_det"].ap75 is None else 100 * m["ap_det"].ap75,
        "fin AP^seg": _ap(m["ap_seg"]),
        "fin PQ": None if m["pq"].pq is None else 100 * m["pq"].pq,
    }


def _agnostic_things(exp: Experiment, ckpt) -> dict:
    model = from_checkpoint(ckpt)
    return {
        "AP^det-a": _ap(evaluate_agnostic(model, exp.splits.test, exp.cfg, "things", "box")),
        "AP^seg-a": _ap(evaluate_agnostic(model, exp.splits.test, exp.cfg, "things", "mask")),
    }


def _warmup_ap_e(exp: Experiment, ckpt) -> Optional[float]:
    return _ap(evaluate_agnostic(from_checkpoint(ckpt), exp.splits.test, exp.cfg, "entities", "mask"))


def _specific_ap(exp: Experiment, ckpt) -> Optional[float]:
    return _ap(evaluate_specific(from_checkpoint(ckpt), exp.splits.test, exp.cfg)["ap_det"])


# one function per ablation: (experiment factory, table) -> fills rows for one seed


def _warmup_data(make: Callable[..., Experiment], table: AblationTable, **_) -> None:
    exp = make(label_mode="objects")
    fin = _finetuned_metrics(exp, exp.finetuned(None))
    table.add("scratch", fin)

    fin = _finetuned_metrics(exp, exp.finetuned("labeler", label_mode="objects"))
    table.add("objects (G,A)", {**_agnostic_things(exp, exp.labeler("objects")), **fin})

    fin = _finetuned_metrics(exp, exp.finetuned("warmup-specific"))
    table.add("objects (P,S)", {"AP^det": _specific_ap(exp, exp.warmup("objects", specific=True)), **fin})

    fin = _finetuned_metrics(exp, exp.finetuned("warmup", label_mode="objects"))
    table.add("objects (P,A)", {**_agnostic_things(exp, exp.warmup("objects")), **fin})

    exp = make(label_mode="entities")
    fin = _finetuned_metrics(exp, exp.finetuned("warmup", label_mode="entities"))
    table.add("entities (P,A)", {"AP^e": _warmup_ap_e(exp, exp.warmup("entities")), **fin})


def _quality_gap(make: Callable[..., Experiment], table: AblationTable, **_) -> None:
    # GT: the labeler trained on ground truth; pseudo: the warmup model trained on its filtered output
    ent = make(label_mode="entities")
    agn_e = {
        "GT": _warmup_ap_e(ent, ent.labeler("entities")),
        "pseudo": _warmup_ap_e(ent, ent.warmup("entities")),
    }
    exp = make(label_mode="objects")
    agn = {
        "GT": _agnostic_things(exp, exp.labeler("objects"))["AP^det-a"],
        "pseudo": _agnostic_things(exp, exp.warmup("objects"))["AP^det-a"],
    }
    spec = {
        "GT": _specific_ap(exp, exp.labeler("objects", specific=True)),
        "pseudo": _specific_ap(exp, exp.warmup("objects", specific=True)),
    }
    rows = (("class-agnostic (AP^e)", agn_e), ("class-agnostic (AP^det-a)", agn), ("class-specific (AP^det)", spec))
    for label, v in rows:
        gap = None if v["GT"] is None or v["pseudo"] is None else v["GT"] - v["pseudo"]
        table.add(label, {**v, "gap": gap})


def _epochs(make, table, warmup_epochs=(1, 2), finetune_epochs=(1, 2), **_) -> None:
    for w in warmup_epochs:
        for f in finetune_epochs:
            exp = make()
            cfg = exp.cfg
            exp = make(warmup=replace(cfg.warmup, epochs=w), finetune=replace(cfg.finetune, epochs=f))
            table.add(f"W {w} / F {f}", {"AP^e": _warmup_ap_e(exp, exp.warmup()), **_finetuned_metrics(exp, exp.finetuned())})


def _delta(make, table, deltas=(0.2, 0.3, 0.4, 0.5, 0.6), **_) -> None:
    for d in deltas:
        exp = make(delta=d)
        pseudo = exp.pseudo()
        table.add(
            f"delta {d:g}",
            {
                "images": float(len(pseudo)),
                "labels": float(pseudo.num_instances),
                "AP^e": _warmup_ap_e(exp, exp.warmup()),
                **_finetuned_metrics(exp, exp.finetuned()),
            },
        )


def _init_parts(make, table, **_) -> None:
    exp = make()
    names = ["none", "+backbone", "+neck", "+head", "+classifier"]
    for label, init in zip(names, INIT_ROWS):
        source = None if not init.parts else "warmup"
        table.add(label, _finetuned_metrics(exp, exp.finetuned(source, init=init)))


def _augmentation(make, table, **_) -> None:
    for w in ("weak", "strong"):
        for f in ("weak", "strong"):
            base = make().cfg
            exp = make(warmup=replace(base.warmup, augment=w), finetune=replace(base.finetune, augment=f))
            table.add(f"W {w} / F {f}", {"AP^e": _warmup_ap_e(exp, exp.warmup()), **_finetuned_metrics(exp, exp.finetuned())})


def _unlabeled_scale(make, table, sizes=(200, 400, 800), **_) -> None:
    exp = make(data=replace(make().cfg.data, unlabeled=max(sizes)))
    for n in sizes:
        scale = None if n == exp.cfg.data.unlabeled else n
        table.add(
            f"{n} images",
            {"AP^e": _warmup_ap_e(exp, exp.warmup(unlabeled=scale)),
             **_finetuned_metrics(exp, exp.finetuned("warmup", unlabeled=scale))},
        )


_RUNNERS = {
    "warmup-data": (_warmup_data, ["AP^det-a", "AP^seg-a", "AP^det", "AP^e", "fin AP^det", "fin AP^seg", "fin PQ"]),
    "quality-gap": (_quality_gap, ["GT", "pseudo", "gap"]),
    "epochs": (_epochs, ["AP^e", "fin AP^det"]),
    "delta": (_delta, ["images", "labels", "AP^e", "fin AP^det"]),
    "init-parts": (_init_parts, ["fin AP^det", "fin AP^det50", "fin AP^det75"]),
    "augmentation": (_augmentation, ["AP^e", "fin AP^det"]),
    "unlabeled-scale": (_unlabeled_scale, ["AP^e", "fin AP^det"]),
}


def run_ablation(
    name: str,
    base: ExperimentConfig,
    seeds: Sequence[int] = (0, 1, 2),
    cache: Optional[Union[str, Path]] = None,
    **grid,
) -> AblationTable:
    """Run one ablation grid over ``seeds``; artifacts go under ``base.out/<name>``.

    Stages shared between cells (and between ablations using the same
    ``cache``) are computed once.
    """
    if name not in _RUNNERS:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    runner, columns = _RUNNERS[name]
    table = AblationTable(name, list(columns), seeds=list(seeds))
    root = Path(base.out) / name
    cache = Path(cache) if cache is not None else Path(base.out) / "cache"

    for seed in seeds:
        def make(**changes) -> Experiment:
            cfg = replace(base, seed=seed, **changes)
            cfg = replace(cfg, out=str(root / f"seed{seed}" / cfg.digest()))
            return Experiment(cfg, cache)

        runner(make, table, **grid)
    return table


def write_table(table: AblationTable, out_dir: Union[str, Path]) -> None:
    from . import plots

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{table.name}.json").write_text(json.dumps(table.to_dict(), indent=2))
    (out / f"{table.name}.txt").write_text(table.format() + "\n")
    metric = next((c for c in ("fin AP^det", "AP^e", "gap") if c in table.columns), table.columns[0])
    vals = [table.mean(r, metric) for r in table.row_labels]
    if all(v is not None for v in vals):
        plots.ablation_bars(table.row_labels, vals, metric, out / f"{table.name}.png")
