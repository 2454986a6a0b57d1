"""Command-line entry point: ``assl <subcommand>``.

Every subcommand reads the shared experiment config (``--config``) and
writes under ``--out``. File arguments default to the locations the
pipeline itself uses, so ``gen``, ``labeler-train``, ``pseudo-label``,
``warmup``, ``finetune`` and ``evaluate`` chain without extra flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .datamodel import Checkpoint, DatasetSplit, read_coco_json, write_coco_json
from .detector import from_checkpoint, predict
from .evaluation import average_precision, panoptic_quality, resolve_overlaps
from .experiment import ExperimentConfig, parse_parts
from .labels import ThresholdPolicy, build_pseudo_dataset, things_only, to_class_agnostic, to_entities
from .pipeline import Experiment, StageError, run_pipeline
from .synthgen import SynthSpec, derive_unlabeled, generate
from .trainer import InitSpec, finetune, train_pseudo_labeler, warmup

log = logging.getLogger("agnostic_ssl")


class CommandError(RuntimeError):
    pass


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _path(value: Optional[str], cfg: ExperimentConfig, default: str) -> Path:
    return Path(value) if value else Path(cfg.out) / default


def _load(path: Path, require_pixels: bool = True) -> DatasetSplit:
    if not path.exists():
        raise CommandError(f"{path} does not exist")
    split = read_coco_json(path)
    if require_pixels and any(im.pixels is None for im in split.images):
        raise CommandError(f"{path}: pixels archive missing")
    return split


def _save_ckpt(ckpt: Checkpoint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
    print(f"wrote {path}")


# ---------------------------------------------------------------- subcommands


SYNTH_FLAGS = ("height", "width", "num_images", "max_things", "thing_classes", "stuff_classes", "noise",
               "min_size", "max_size", "id_prefix")


def _synth_spec(args, cfg: ExperimentConfig) -> SynthSpec:
    base = cfg.data.synth_spec(cfg.seed, cfg.data.labeled)
    changes = {}
    for name in SYNTH_FLAGS:
        value = getattr(args, name)
        if value is None:
            continue
        if name == "thing_classes":
            value = tuple(tuple(reversed(c.split("_", 1))) for c in value.split(","))
        elif name == "stuff_classes":
            value = tuple(value.split(","))
        changes[name] = value
    return replace(base, **changes)


def cmd_gen(args, cfg: ExperimentConfig) -> None:
    if not any(getattr(args, name) is not None for name in SYNTH_FLAGS):
        exp = Experiment(cfg)
        exp.write_data()
        for name in ("labeled", "unlabeled", "test"):
            print(f"wrote {Path(cfg.out) / 'data' / (name + '.json')} ({len(getattr(exp.splits, name))} images)")
        return
    # explicit generator flags: one split from exactly that spec
    split = generate(_synth_spec(args, cfg), start=args.start)
    if args.unlabeled:
        split = derive_unlabeled(split)
    out = _path(args.file, cfg, "data/synth.json")
    write_coco_json(split, out)
    print(f"wrote {out} ({len(split)} images, {split.num_instances} instances)")


def cmd_labeler_train(args, cfg: ExperimentConfig) -> None:
    labeled = _load(_path(args.input, cfg, "data/labeled.json"))
    mode = args.label_mode or cfg.label_mode
    result = train_pseudo_labeler(labeled, cfg.detector, cfg.stage("labeler"), mode)
    result.checkpoint.metadata["trace"] = result.trace
    _save_ckpt(result.checkpoint, _path(args.checkpoint, cfg, "checkpoints/labeler.npz"))


def cmd_pseudo_label(args, cfg: ExperimentConfig) -> None:
    unlabeled = _load(_path(args.input, cfg, "data/unlabeled.json"))
    labeler = from_checkpoint(Checkpoint.load(_path(args.labeler_checkpoint, cfg, "checkpoints/labeler.npz")))
    delta = cfg.delta if args.threshold is None else args.threshold
    pseudo = build_pseudo_dataset(unlabeled, labeler, ThresholdPolicy(delta), nms_iou=cfg.evaluation.nms_iou)
    out = _path(args.out_file, cfg, "splits/pseudo.json")
    write_coco_json(pseudo, out)
    print(f"wrote {out} ({len(pseudo)} of {len(unlabeled)} images kept, {pseudo.num_instances} labels, delta={delta})")


def cmd_warmup(args, cfg: ExperimentConfig) -> None:
    pseudo = _load(_path(args.input, cfg, "splits/pseudo.json"))
    labeled = _load(_path(args.labeled, cfg, "data/labeled.json"), require_pixels=False)
    result = warmup(pseudo, cfg.detector, cfg.stage("warmup"), labeled.ids)
    result.checkpoint.metadata.update(trace=result.trace, read_ids=sorted(result.seen_ids))
    path = _path(args.checkpoint, cfg, "checkpoints/warmup.npz")
    _save_ckpt(result.checkpoint, path)
    audit = {"labeled_ids": sorted(labeled.ids), "warmup_read_ids": sorted(result.seen_ids),
             "intersection": sorted(set(labeled.ids) & result.seen_ids)}
    (path.parent / "warmup-audit.json").write_text(json.dumps(audit, indent=1))


def cmd_finetune(args, cfg: ExperimentConfig) -> None:
    labeled = things_only(_load(_path(args.input, cfg, "data/labeled.json")))
    init = cfg.init
    if args.init_parts is not None or args.classifier_init is not None:
        init = InitSpec(
            parse_parts(args.init_parts) if args.init_parts is not None else init.parts,
            args.classifier_init or init.classifier_init,
        )
    source = None
    if init.parts or init.classifier_init == "copy":
        source = Checkpoint.load(_path(args.source, cfg, "checkpoints/warmup.npz"))
    det = cfg.detector.with_classes(cfg.num_thing_classes)
    result = finetune(source, labeled, det, init, cfg.stage("finetune"))
    result.checkpoint.metadata["trace"] = result.trace
    _save_ckpt(result.checkpoint, _path(args.checkpoint, cfg, "checkpoints/finetuned.npz"))


def cmd_predict(args, cfg: ExperimentConfig) -> None:
    split = _load(_path(args.input, cfg, "data/test.json"))
    model = from_checkpoint(Checkpoint.load(_path(args.checkpoint, cfg, "checkpoints/finetuned.npz")))
    ev = cfg.evaluation
    mode = "agnostic" if model.cfg.agnostic else "specific"
    preds = predict(model, split.images, ev.score_floor, ev.nms_iou, mode, max_detections=ev.max_detections)
    # predictions are stored as a scored split; images without detections stay listed
    out_split = DatasetSplit("pseudo", tuple(im.with_instances(p) for im, p in zip(split.images, preds)),
                             split.class_names if mode == "specific" else None)
    out = _path(args.out_file, cfg, "predictions.json")
    write_coco_json(out_split, out, write_pixels=False)
    print(f"wrote {out} ({sum(map(len, preds))} detections)")


def _targets(split: DatasetSplit, target: str) -> DatasetSplit:
    if target == "raw":
        return split
    if target == "things":
        return things_only(split)
    if target == "entities":
        return to_entities(split)
    if target == "things-agnostic":
        return to_class_agnostic(things_only(split))
    raise CommandError(f"unknown target {target!r}")


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    preds_split = _load(Path(args.pred), require_pixels=False)
    gt_split = _targets(_load(Path(args.gt), require_pixels=False), args.target)
    gt_by_id = {im.id: im for im in gt_split.images}
    missing = [im.id for im in preds_split.images if im.id not in gt_by_id]
    if missing:
        raise CommandError(f"predictions for unknown images, e.g. {missing[:3]}")
    pred_by_id = {im.id: list(im.instances) for im in preds_split.images}
    ids = [im.id for im in gt_split.images]
    preds = [pred_by_id.get(i, []) for i in ids]
    gts = [list(gt_by_id[i].instances) for i in ids]
    ev = cfg.evaluation
    splits = (ev.area_small, ev.area_medium)
    if args.metric == "ap":
        report = average_precision(preds, gts, args.kind, "specific", splits, ev.max_detections)
    elif args.metric == "ap-agnostic":
        strip = lambda xs: [replace(i, class_id=None) for i in xs]  # noqa: E731
        report = average_precision([strip(p) for p in preds], [strip(g) for g in gts], args.kind, "agnostic", splits,
                                   ev.max_detections)
    else:
        class_aware = all(i.class_id is not None for img in preds + gts for i in img)
        # same panoptic conversion as the pipeline: confident segments pasted without overlap
        panoptic = [resolve_overlaps([p for p in img if (p.score or 0.0) > ev.pq_threshold]) for img in preds]
        report = panoptic_quality(panoptic, gts, class_aware=class_aware)
    result = report.to_dict()
    text = json.dumps(result, indent=2)
    print(text)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n")
    if args.plot_dir and report.pr_curves:
        from . import plots

        plots.pr_curves(report.pr_curves, Path(args.plot_dir) / f"pr_{args.metric}_{args.kind}.png")


def cmd_run(args, cfg: ExperimentConfig) -> None:
    report = run_pipeline(cfg, cache=args.cache)
    print(json.dumps({"config_digest": report["config_digest"], **report["headline"]}, indent=2))
    print(f"report: {Path(cfg.out) / 'report.json'}")


def cmd_ablate(args, cfg: ExperimentConfig) -> None:
    from .ablation import run_ablation, write_table

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    grid = {}
    if args.name == "epochs":
        grid = {"warmup_epochs": _ints(args.warmup_epochs or "1,2"), "finetune_epochs": _ints(args.finetune_epochs or "1,2")}
    elif args.name == "delta" and args.deltas:
        grid = {"deltas": tuple(float(x) for x in args.deltas.split(","))}
    elif args.name == "unlabeled-scale" and args.sizes:
        grid = {"sizes": _ints(args.sizes)}
    table = run_ablation(args.name, cfg, seeds, cache=args.cache, **grid)
    write_table(table, Path(cfg.out) / "tables")
    print(table.format())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


# ---------------------------------------------------------------- parser


def _global_flags(p: argparse.ArgumentParser, with_out: bool, defaults: bool) -> None:
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", help="experiment config (INI)", **kw)
    p.add_argument("--seed", type=int, help="override the experiment seed", **kw)
    if with_out:
        p.add_argument("--out", help="output directory (overrides the config)", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="assl", description=__doc__.splitlines()[0])
    _global_flags(p, with_out=True, defaults=True)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name: str, help: str, with_out: bool = True) -> argparse.ArgumentParser:
        # global flags are also accepted after the subcommand
        s = sub.add_parser(name, help=help)
        _global_flags(s, with_out=with_out, defaults=False)
        return s

    s = command("gen", "generate the experiment splits, or one split from explicit generator flags")
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--num-images", type=int)
    s.add_argument("--max-things", type=int)
    s.add_argument("--thing-classes", help="comma list of color_shape names, e.g. red_circle,blue_square")
    s.add_argument("--stuff-classes", help="comma list from sky,ground")
    s.add_argument("--noise", type=float)
    s.add_argument("--min-size", type=int)
    s.add_argument("--max-size", type=int)
    s.add_argument("--id-prefix")
    s.add_argument("--start", type=int, default=0, help="index of the first generated image")
    s.add_argument("--unlabeled", action="store_true", help="strip annotations from the generated split")
    s.add_argument("--file", help="output JSON for a single split (default: <out>/data/synth.json)")

    s = command("labeler-train", "train the class-agnostic pseudo labeler")
    s.add_argument("--in", dest="input")
    s.add_argument("--checkpoint")
    s.add_argument("--label-mode", choices=["objects", "entities"])

    s = command("pseudo-label", "label the unlabeled split with a labeler checkpoint", with_out=False)
    s.add_argument("--threshold", type=float, help="score threshold delta (default: config)")
    s.add_argument("--labeler-checkpoint")
    s.add_argument("--in", dest="input")
    s.add_argument("--out", dest="out_file")

    s = command("warmup", "class-agnostic training on pseudo labels")
    s.add_argument("--in", dest="input")
    s.add_argument("--labeled", help="labeled split whose ids the warmup must not touch")
    s.add_argument("--checkpoint")

    s = command("finetune", "class-specific training from a warmup checkpoint")
    s.add_argument("--in", dest="input")
    s.add_argument("--source", help="warmup (or labeler) checkpoint")
    s.add_argument("--init-parts", help="comma list from backbone,neck,head,classifier ('none' for scratch)")
    s.add_argument("--classifier-init", choices=["random", "copy"])
    s.add_argument("--checkpoint")

    s = command("predict", "write a checkpoint's detections as COCO-style JSON", with_out=False)
    s.add_argument("--in", dest="input")
    s.add_argument("--checkpoint")
    s.add_argument("--out", dest="out_file")

    s = command("evaluate", "score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metric", choices=["ap", "ap-agnostic", "pq"], default="ap")
    s.add_argument("--kind", choices=["box", "mask"], default="box")
    s.add_argument("--target", choices=["raw", "things", "entities", "things-agnostic"], default="raw",
                   help="transform applied to the ground truth first")
    s.add_argument("--report", help="also write the JSON report here")
    s.add_argument("--plot-dir", help="write PR-curve plots here")

    s = command("run", "full pipeline: generate, labeler, pseudo-label, warmup, finetune, evaluate")
    s.add_argument("--cache", help="shared stage cache directory")

    s = command("ablate", "run an ablation grid")
    s.add_argument("name", choices=["warmup-data", "epochs", "delta", "init-parts", "augmentation",
                                    "unlabeled-scale", "quality-gap"])
    s.add_argument("--seeds", help="comma list (default: the config seed)")
    s.add_argument("--cache")
    s.add_argument("--warmup-epochs")
    s.add_argument("--finetune-epochs")
    s.add_argument("--deltas")
    s.add_argument("--sizes")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "labeler-train": cmd_labeler_train,
    "pseudo-label": cmd_pseudo_label,
    "warmup": cmd_warmup,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    stage = args.command
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to a nonzero exit naming the stage
        if args.verbose:
            raise
        print(f"error in stage {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
