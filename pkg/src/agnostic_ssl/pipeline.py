"""Stage sequencing with digest-keyed artifacts, evaluation and reports."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

from .datamodel import Checkpoint, DatasetSplit, read_coco_json, write_coco_json
from .detector import Detector, build_detector, from_checkpoint, load_parts, nms, predict, to_checkpoint
from .evaluation import EvalReport, average_precision, panoptic_quality, resolve_overlaps
from .evaluation.geometry import box_array
from .experiment import TEST_START, UNLABELED_START, ExperimentConfig, digest_of
from .labels import (
    ThresholdPolicy,
    assemble_pseudo_split,
    build_pseudo_dataset,
    strip_scores,
    things_only,
    to_class_agnostic,
    to_entities,
)
from .synthgen import derive_unlabeled, generate
from .trainer import InitSpec, StageResult, finetune, init_finetune_model, train_pseudo_labeler, train_stage, warmup

log = logging.getLogger(__name__)

PIPELINE_STAGES = ("generate", "labeler-train", "pseudo-label", "warmup", "finetune", "evaluate")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Splits:
    labeled: DatasetSplit
    unlabeled: DatasetSplit
    test: DatasetSplit


def make_splits(cfg: ExperimentConfig) -> Splits:
    data = cfg.data
    labeled = generate(data.synth_spec(cfg.seed, data.labeled))
    pool = generate(data.synth_spec(cfg.seed, data.unlabeled), start=UNLABELED_START)
    test = generate(data.synth_spec(cfg.seed, data.test), start=TEST_START)
    return Splits(labeled, derive_unlabeled(pool), test)


# ---------------------------------------------------------------- evaluation


def agnostic_targets(split: DatasetSplit, target: str) -> list[list]:
    """Class-free ground truth: ``"entities"`` (things and stuff) or ``"things"``."""
    if target == "entities":
        gt = to_entities(split)
    elif target == "things":
        gt = to_class_agnostic(things_only(split))
    else:
        raise ValueError(f"unknown agnostic target {target!r}")
    return [list(im.instances) for im in gt.images]


def evaluate_agnostic(model: Detector, split: DatasetSplit, cfg: ExperimentConfig, target: str, kind: str) -> EvalReport:
    """AP^e (entities, mask) or AP^{det-a}/AP^{seg-a} (things) of a detector scored class-free."""
    ev = cfg.evaluation
    mode = "agnostic" if model.cfg.agnostic else "specific"
    preds = predict(model, split.images, ev.score_floor, ev.nms_iou, mode, max_detections=ev.max_detections,
                    with_masks=kind == "mask")
    preds = [[replace(p, class_id=None) for p in img] for img in preds]
    if mode == "specific":
        # per-class NMS leaves duplicates across classes; merge them as one category would
        merged = []
        for img in preds:
            if img:
                keep = nms(box_array(img), np.array([p.score for p in img]), ev.nms_iou)
                img = [img[k] for k in keep]
            merged.append(img)
        preds = merged
    return average_precision(preds, agnostic_targets(split, target), kind, "agnostic",
                             (ev.area_small, ev.area_medium), ev.max_detections)


def evaluate_specific(model: Detector, split: DatasetSplit, cfg: ExperimentConfig) -> dict[str, EvalReport]:
    """AP^det, AP^seg and class-aware PQ on thing classes."""
    ev = cfg.evaluation
    gt_split = things_only(split)
    gts = [list(im.instances) for im in gt_split.images]
    preds = predict(model, split.images, ev.score_floor, ev.nms_iou, "specific", max_detections=ev.max_detections)
    splits = (ev.area_small, ev.area_medium)
    out = {
        "ap_det": average_precision(preds, gts, "box", "specific", splits, ev.max_detections),
        "ap_seg": average_precision(preds, gts, "mask", "specific", splits, ev.max_detections),
    }
    panoptic = [resolve_overlaps([p for p in img if p.score > ev.pq_threshold]) for img in preds]
    out["pq"] = panoptic_quality(panoptic, gts, class_aware=True)
    return out


# ---------------------------------------------------------------- experiment


class Experiment:
    """One configured run; stages are computed lazily and cached by digest.

    Artifacts live under ``cfg.out``. A shared ``cache`` directory lets
    ablation cells reuse stages whose inputs are identical.
    """

    def __init__(self, cfg: ExperimentConfig, cache: Optional[Union[str, Path]] = None) -> None:
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.cache = Path(cache) if cache is not None else None
        self._splits: Optional[Splits] = None
        self._ckpts: dict[str, Checkpoint] = {}
        self._pseudo: dict[str, DatasetSplit] = {}
        self.skipped: list[str] = []
        self._last_pr: dict = {}

    # digests ---------------------------------------------------------------

    def _data_key(self) -> dict:
        return {"seed": self.cfg.seed, "data": self.cfg.to_dict()["data"]}

    def labeler_digest(self, label_mode: str, specific: bool = False) -> str:
        d = self.cfg.to_dict()
        return digest_of(["labeler", self._data_key(), label_mode, specific, d["detector"], d["labeler"]])

    def pseudo_digest(self, label_mode: str, specific: bool = False, unlabeled: Optional[int] = None) -> str:
        d = self.cfg.to_dict()
        n = self.cfg.data.unlabeled if unlabeled is None else unlabeled
        return digest_of(["pseudo", self.labeler_digest(label_mode, specific), n, self.cfg.delta, d["evaluation"]["nms_iou"]])

    def warmup_digest(self, label_mode: str, specific: bool = False, unlabeled: Optional[int] = None) -> str:
        d = self.cfg.to_dict()
        return digest_of(["warmup", self.pseudo_digest(label_mode, specific, unlabeled), d["warmup"]])

    # artifact store --------------------------------------------------------

    def _checkpoint(self, name: str, digest: str, compute: Callable[[], StageResult]) -> Checkpoint:
        key = f"{name}-{digest}"
        if key in self._ckpts:
            return self._ckpts[key]
        path = self.out / "checkpoints" / f"{name}.npz"
        ckpt = None
        if path.exists():
            found = Checkpoint.load(path)
            if found.metadata.get("stage_digest") == digest:
                ckpt = found
                self.skipped.append(name)
        if ckpt is None and self.cache is not None and (self.cache / f"{key}.npz").exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(self.cache / f"{key}.npz", path)
            ckpt = Checkpoint.load(path)
            self.skipped.append(name)
        if ckpt is None:
            result = compute()
            ckpt = result.checkpoint
            ckpt.metadata.update(stage_digest=digest, trace=result.trace, components=result.components,
                                 read_ids=sorted(result.seen_ids))
            path.parent.mkdir(parents=True, exist_ok=True)
            ckpt.save(path)
            if self.cache is not None:
                self.cache.mkdir(parents=True, exist_ok=True)
                ckpt.save(self.cache / f"{key}.npz")
        self._ckpts[key] = ckpt
        return ckpt

    def _split_artifact(self, name: str, digest: str, compute: Callable[[], DatasetSplit]) -> DatasetSplit:
        key = f"{name}-{digest}"
        if key in self._pseudo:
            return self._pseudo[key]
        path = self.out / "splits" / f"{name}.json"
        stamp = path.with_suffix(".digest")
        split = None
        if path.exists() and stamp.exists() and stamp.read_text() == digest:
            split = self._read_split(path)
            self.skipped.append(name)
        elif self.cache is not None and (self.cache / f"{key}.json").exists():
            split = self._read_split(self.cache / f"{key}.json")
            self.skipped.append(name)
        fresh = split is None
        if fresh:
            split = compute()
            if self.cache is not None:
                self.cache.mkdir(parents=True, exist_ok=True)
                write_coco_json(split, self.cache / f"{key}.json", write_pixels=False)
        if not (path.exists() and stamp.exists() and stamp.read_text() == digest):
            path.parent.mkdir(parents=True, exist_ok=True)
            write_coco_json(split, path, write_pixels=False)
            stamp.write_text(digest)
        if fresh:
            # downstream stages always see the split as persisted, so resumed runs match fresh ones
            split = self._read_split(path)
        self._pseudo[key] = split
        return split

    def _read_split(self, path: Path) -> DatasetSplit:
        """Read a pseudo split stored without pixels; pixels come from the unlabeled pool."""
        split = read_coco_json(path, load_pixels=False)
        pool = {im.id: im for im in self.splits.unlabeled.images}
        return split.with_images([replace(im, pixels=pool[im.id].pixels) for im in split.images])

    # stages ----------------------------------------------------------------

    @property
    def splits(self) -> Splits:
        if self._splits is None:
            self._splits = make_splits(self.cfg)
        return self._splits

    def write_data(self) -> None:
        data = self.out / "data"
        data.mkdir(parents=True, exist_ok=True)
        for name in ("labeled", "unlabeled", "test"):
            write_coco_json(getattr(self.splits, name), data / f"{name}.json")

    def labeler(self, label_mode: Optional[str] = None, specific: bool = False) -> Checkpoint:
        """Agnostic pseudo labeler, or with ``specific`` a class-specific detector trained on GT things."""
        mode = label_mode or self.cfg.label_mode
        cfg = self.cfg
        name = "labeler-specific" if specific else f"labeler-{mode}"

        def compute() -> StageResult:
            if specific:
                model = build_detector(cfg.detector.with_classes(cfg.num_thing_classes), seed=cfg.seed)
                result = train_stage(model, things_only(self.splits.labeled), cfg.stage("labeler"), "specific", True)
                result.checkpoint = to_checkpoint(model, stage="labeler", label_mode="objects-specific", seed=cfg.seed,
                                                  epoch=cfg.labeler.epochs, mode="specific")
                return result
            return train_pseudo_labeler(self.splits.labeled, cfg.detector, cfg.stage("labeler"), mode)

        return self._checkpoint(name, self.labeler_digest(mode, specific), compute)

    def pseudo(self, label_mode: Optional[str] = None, specific: bool = False, unlabeled: Optional[int] = None) -> DatasetSplit:
        """Pseudo-labeled split from the first ``unlabeled`` images of the pool."""
        mode = label_mode or self.cfg.label_mode
        n = self.cfg.data.unlabeled if unlabeled is None else unlabeled
        if n > self.cfg.data.unlabeled:
            raise ValueError(f"asked for {n} unlabeled images, pool has {self.cfg.data.unlabeled}")
        name = "pseudo-specific" if specific else f"pseudo-{mode}"
        if unlabeled is not None:
            name += f"-{n}"

        def compute() -> DatasetSplit:
            model = from_checkpoint(self.labeler(mode, specific))
            pool = self.splits.unlabeled.with_images(self.splits.unlabeled.images[:n])
            policy = ThresholdPolicy(self.cfg.delta)
            ev = self.cfg.evaluation
            if not specific:
                return build_pseudo_dataset(pool, model, policy, nms_iou=ev.nms_iou)
            preds = predict(model, pool.images, policy.delta, ev.nms_iou, "specific")
            return assemble_pseudo_split(pool, preds, policy)

        return self._split_artifact(name, self.pseudo_digest(mode, specific, unlabeled), compute)

    def warmup(self, label_mode: Optional[str] = None, specific: bool = False, unlabeled: Optional[int] = None) -> Checkpoint:
        mode = label_mode or self.cfg.label_mode
        cfg = self.cfg
        name = "warmup-specific" if specific else f"warmup-{mode}"
        if unlabeled is not None:
            name += f"-{unlabeled}"

        def compute() -> StageResult:
            pseudo = self.pseudo(mode, specific, unlabeled)
            stage = cfg.stage("warmup")
            if stage.epochs == 0 and len(pseudo) == 0:
                # nothing to train on and nothing to train for: fresh weights
                model = build_detector(cfg.detector.with_classes(1), seed=cfg.seed)
                return StageResult(model, checkpoint=to_checkpoint(model, stage="warmup", seed=cfg.seed, epoch=0))
            if specific:
                targets = pseudo.with_images([im.with_instances(strip_scores(im.instances)) for im in pseudo.images])
                model = build_detector(cfg.detector.with_classes(cfg.num_thing_classes), seed=cfg.seed)
                result = train_stage(model, targets, stage, "specific", True)
                result.checkpoint = to_checkpoint(model, stage="warmup", seed=cfg.seed, epoch=stage.epochs, mode="specific")
                return result
            return warmup(pseudo, cfg.detector, stage, self.splits.labeled.ids)

        return self._checkpoint(name, self.warmup_digest(mode, specific, unlabeled), compute)

    def finetuned(self, source: Optional[str] = "warmup", init: Optional[InitSpec] = None,
                  label_mode: Optional[str] = None, unlabeled: Optional[int] = None) -> Checkpoint:
        """Class-specific model on labeled things.

        ``source`` is ``"warmup"``, ``"labeler"`` (agnostic GT), ``"warmup-specific"``
        (class-specific pseudo labels) or ``None`` (from scratch).
        """
        cfg = self.cfg
        mode = label_mode or cfg.label_mode
        init = init if init is not None else cfg.init
        if source is None:
            init = InitSpec(frozenset(), "random")
            src_digest = "scratch"
        elif source == "warmup":
            src_digest = self.warmup_digest(mode, False, unlabeled)
        elif source == "labeler":
            src_digest = self.labeler_digest(mode)
        elif source == "warmup-specific":
            src_digest = self.warmup_digest("objects", True, unlabeled)
        else:
            raise ValueError(f"unknown finetuning source {source!r}")
        d = cfg.to_dict()
        init_key = {"parts": sorted(init.parts), "classifier_init": init.classifier_init}
        digest = digest_of(["finetune", src_digest, init_key, d["finetune"], d["detector"], self._data_key()])

        def compute() -> StageResult:
            det = cfg.detector.with_classes(cfg.num_thing_classes)
            labeled = things_only(self.splits.labeled)
            if source is None:
                return finetune(None, labeled, det, init, cfg.stage("finetune"))
            if source == "warmup-specific":
                # a class-specific source keeps its own classifier; channels already match
                ckpt = self.warmup("objects", True, unlabeled)
                model = init_finetune_model(ckpt, det, InitSpec(init.parts - {"classifier"}, "random"), cfg.seed)
                if "classifier" in init.parts:
                    load_parts(model, ckpt, ["classifier"])
                result = train_stage(model, labeled, cfg.stage("finetune"), "specific", True)
                result.checkpoint = to_checkpoint(model, stage="finetuned", seed=cfg.seed, epoch=cfg.finetune.epochs,
                                                  mode="specific", init_parts=sorted(init.parts))
                return result
            ckpt = self.warmup(mode, False, unlabeled) if source == "warmup" else self.labeler(mode)
            return finetune(ckpt, labeled, det, init, cfg.stage("finetune"))

        tag = {"warmup": "", "labeler": "-from-labeler", "warmup-specific": "-from-specific", None: "-scratch"}[source]
        parts_tag = "" if init == cfg.init or source is None else "-" + ("+".join(sorted(init.parts)) or "none") + f"-{init.classifier_init}"
        scale_tag = f"-{unlabeled}" if unlabeled is not None else ""
        return self._checkpoint(f"finetuned{tag}{parts_tag}{scale_tag}", digest, compute)

    # reporting -------------------------------------------------------------

    def audit(self) -> dict:
        warm = self.warmup()
        labeled = set(self.splits.labeled.ids)
        read = set(warm.metadata.get("read_ids", []))
        return {
            "labeled_ids": sorted(labeled),
            "warmup_read_ids": sorted(read),
            "intersection": sorted(labeled & read),
            "pseudo_source_ids": sorted(self.pseudo().ids),
        }

    def run(self) -> dict:
        """Full three-stage pipeline; writes artifacts, audit log and report under ``cfg.out``."""
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.save(self.out / "config.ini")
        steps: list[tuple[str, Callable[[], object]]] = [
            ("generate", self.write_data),
            ("labeler-train", self.labeler),
            ("pseudo-label", self.pseudo),
            ("warmup", self.warmup),
            ("finetune", self.finetuned),
        ]
        for stage, fn in steps:
            try:
                fn()
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise StageError(stage, exc) from exc
        try:
            audit = self.audit()
            if audit["intersection"]:
                raise RuntimeError(f"warmup read labeled images: {audit['intersection'][:3]}")
            (self.out / "audit.json").write_text(json.dumps(audit, indent=1))
            report = self.report()
            (self.out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        except Exception as exc:  # noqa: BLE001
            raise StageError("evaluate", exc) from exc
        try:
            from . import plots

            plots.stage_losses(report, self.out / "plots" / "loss.png")
            plots.pr_curves(self._last_pr, self.out / "plots" / "pr_det.png")
        except Exception as exc:  # plotting never decides success
            log.warning("plotting failed: %s", exc)
        return report

    def report(self) -> dict:
        cfg = self.cfg
        test = self.splits.test
        lab = from_checkpoint(self.labeler())
        warm = from_checkpoint(self.warmup())
        fin = from_checkpoint(self.finetuned())
        lab_e = evaluate_agnostic(lab, test, cfg, "entities" if cfg.label_mode == "entities" else "things", "mask")
        warm_e = evaluate_agnostic(warm, test, cfg, "entities", "mask")
        fin_m = evaluate_specific(fin, test, cfg)
        self._last_pr = fin_m["ap_det"].pr_curves
        pseudo = self.pseudo()
        headline = {
            "labeler_ap_e": lab_e.ap,
            "warmup_ap_e": warm_e.ap,
            "ap_det": fin_m["ap_det"].ap,
            "ap_seg": fin_m["ap_seg"].ap,
            "pq": fin_m["pq"].pq,
        }
        return {
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "label_mode": cfg.label_mode,
            "delta": cfg.delta,
            "headline": {k: None if v is None else round(100 * v, 6) for k, v in headline.items()},
            "labeler": {"ap_e": lab_e.to_dict()},
            "pseudo": {"images": len(pseudo), "instances": pseudo.num_instances, "source_images": cfg.data.unlabeled},
            "warmup": {"ap_e": warm_e.to_dict()},
            "finetuned": {k: v.to_dict() for k, v in fin_m.items()},
            "loss": {
                name: ck.metadata.get("trace", [])
                for name, ck in (("labeler", self.labeler()), ("warmup", self.warmup()), ("finetune", self.finetuned()))
            },
        }



def run_pipeline(cfg: ExperimentConfig, cache: Optional[Union[str, Path]] = None) -> dict:
    return Experiment(cfg, cache).run()
