"""The shared optimizer loop and the three training stages built on it."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np
import torch

from .augment import AugmentPolicy, apply as augment
from .datamodel import PARTS, Checkpoint, CheckpointError, DatasetSplit, DetectorConfig, ValidationError
from .detector import (
    Detector,
    LossWeights,
    assign_targets,
    build_detector,
    detection_loss,
    load_parts,
    mask_loss,
    to_checkpoint,
)
from .detector.inference import to_batch
from .labels import binarize_targets, things_only, to_class_agnostic, to_entities

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[float, ...] = (2 / 3, 8 / 9)
    lr_decay: float = 0.1
    warmup_iters: int = 50
    augment: str = "weak"
    seed: int = 0
    weights: LossWeights = LossWeights()
    grad_clip: float = 10.0
    mask_samples: int = 16

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        AugmentPolicy(mode=self.augment)  # validates the mode name

    def lr_at(self, epoch: int, it: int) -> float:
        """Learning rate for global iteration ``it`` inside ``epoch``."""
        lr = self.lr * self.lr_decay ** sum(epoch >= round(f * self.epochs) for f in self.milestones)
        if it < self.warmup_iters:
            lr *= (1 + 2 * it / self.warmup_iters) / 3
        return lr


@dataclass(frozen=True)
class InitSpec:
    """Which parts of a source checkpoint seed the finetuned model.

    ``classifier_init="copy"`` replicates the source's single agnostic
    output channel into every class channel; ``"random"`` keeps a fresh draw.
    """

    parts: frozenset = frozenset(PARTS)
    classifier_init: str = "copy"

    def __post_init__(self) -> None:
        parts = frozenset(self.parts)
        object.__setattr__(self, "parts", parts)
        if parts - set(PARTS):
            raise ValueError(f"unknown parts {sorted(parts - set(PARTS))}")
        if self.classifier_init not in ("random", "copy"):
            raise ValueError(f"classifier_init must be 'random' or 'copy', got {self.classifier_init!r}")
        if self.classifier_init == "copy" and "classifier" not in parts:
            raise ValueError("classifier_init='copy' needs the classifier part")

    @property
    def transferred(self) -> list[str]:
        """Parts copied verbatim (the classifier is handled separately)."""
        return [p for p in PARTS if p in self.parts and p != "classifier"]


# The five rows of the initialization ablation, from scratch to full transfer.
INIT_ROWS: tuple[InitSpec, ...] = (
    InitSpec(frozenset(), "random"),
    InitSpec(frozenset({"backbone"}), "random"),
    InitSpec(frozenset({"backbone", "neck"}), "random"),
    InitSpec(frozenset({"backbone", "neck", "head"}), "random"),
    InitSpec(frozenset(PARTS), "copy"),
)


@dataclass
class StageResult:
    model: Detector
    trace: list[float] = field(default_factory=list)
    components: list[dict] = field(default_factory=list)
    seen_ids: set = field(default_factory=set)
    checkpoint: Optional[Checkpoint] = None


def _check_mode(split: DatasetSplit, model: Detector, mode: str) -> None:
    if mode == "agnostic":
        if not model.cfg.agnostic:
            raise ValidationError("agnostic training needs a single-class detector")
        return
    if mode != "specific":
        raise ValueError(f"unknown mode {mode!r}")
    if split.role == "unlabeled":
        raise ValidationError("class-specific training needs class ids; got an unlabeled split")
    for im in split.images:
        for inst in im.instances:
            if inst.class_id is None or inst.class_id >= model.cfg.num_classes:
                raise ValidationError(
                    f"image {im.id}: class id {inst.class_id} invalid for {model.cfg.num_classes} classes"
                )


def train_stage(
    model: Detector,
    split: DatasetSplit,
    config: StageConfig,
    mode: str = "agnostic",
    with_masks: bool = True,
) -> StageResult:
    """Train ``model`` in place for ``config.epochs`` epochs over ``split``.

    Data order and augmentation come from a generator keyed by
    ``(config.seed, epoch)``, so the result is a pure function of the
    initial weights, the split and the config.
    """
    split.validate(require_pixels=True)
    _check_mode(split, model, mode)
    result = StageResult(model=model)
    if config.epochs == 0 or len(split) == 0:
        return result

    policy = AugmentPolicy(mode=config.augment)
    params = [p for p in model.parameters() if p.requires_grad]
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    opt = torch.optim.SGD(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.lr,
        momentum=config.momentum,
    )
    model.train()
    n = len(split)
    it = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(n)
        totals: list[float] = []
        comps: dict[str, list[float]] = {}
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            draws = [policy.sample(rng) for _ in idx]
            # one geometric scale per batch keeps padding (and group-norm statistics) honest
            draws = [replace(d, scale=draws[0].scale) for d in draws]
            batch = [augment(policy, split.images[i], d) for i, d in zip(idx, draws)]
            result.seen_ids.update(split.images[i].id for i in idx)

            x = to_batch(batch, model)
            preds = model(x)
            targets = assign_targets([im.instances for im in batch], model.cfg, tuple(x.shape[-2:]))
            out = detection_loss(preds, targets, mode, config.weights)
            total = out.total
            parts = dict(out.parts)
            if with_masks:
                l_mask = mask_loss(
                    preds,
                    targets,
                    [[inst.mask for inst in im.instances] for im in batch],
                    model.cfg.dynamic_width,
                    config.mask_samples,
                )
                parts["mask"] = l_mask
                total = total + config.weights.mask * l_mask
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at step {it} (epoch {epoch}): "
                    + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items())
                )
            for g in opt.param_groups:
                g["lr"] = config.lr_at(epoch, it)
            opt.zero_grad(set_to_none=True)
            total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            it += 1
            totals.append(float(total.detach()))
            for k, v in parts.items():
                comps.setdefault(k, []).append(float(v.detach()))
        result.trace.append(math.fsum(totals) / len(totals))
        result.components.append({k: math.fsum(v) / len(v) for k, v in comps.items()})
        log.debug("epoch %d/%d loss %.4f", epoch + 1, config.epochs, result.trace[-1])
    return result


def labeler_training_split(labeled: DatasetSplit, label_mode: str) -> DatasetSplit:
    """Class-free targets for the pseudo labeler: things only, or things plus stuff."""
    if label_mode == "objects":
        return to_class_agnostic(things_only(labeled))
    if label_mode == "entities":
        return to_entities(labeled)
    raise ValueError(f"label_mode must be 'objects' or 'entities', got {label_mode!r}")


def train_pseudo_labeler(
    labeled: DatasetSplit,
    det_cfg: DetectorConfig,
    config: StageConfig,
    label_mode: str = "entities",
    init_seed: Optional[int] = None,
) -> StageResult:
    if labeled.role != "labeled":
        raise ValidationError(f"pseudo labeler trains on a labeled split, got {labeled.role!r}")
    split = labeler_training_split(labeled, label_mode)
    model = build_detector(det_cfg.with_classes(1), seed=config.seed if init_seed is None else init_seed)
    result = train_stage(model, split, config, mode="agnostic", with_masks=True)
    result.checkpoint = to_checkpoint(
        model, stage="labeler", label_mode=label_mode, seed=config.seed, epoch=config.epochs, mode="agnostic"
    )
    return result


def warmup(
    pseudo: DatasetSplit,
    det_cfg: DetectorConfig,
    config: StageConfig,
    labeled_ids: Iterable[str],
    init_seed: Optional[int] = None,
) -> StageResult:
    """Class-agnostic training on pseudo labels only; never sees a labeled image."""
    if pseudo.role != "pseudo":
        raise ValidationError(f"warmup needs a pseudo split, got {pseudo.role!r}")
    if len(pseudo) == 0:
        raise ValidationError("warmup needs at least one pseudo-labeled image")
    overlap = set(pseudo.ids) & set(labeled_ids)
    if overlap:
        raise ValidationError(f"pseudo split shares {len(overlap)} image ids with the labeled split, e.g. {sorted(overlap)[:3]}")
    targets = binarize_targets(pseudo)
    model = build_detector(det_cfg.with_classes(1), seed=config.seed if init_seed is None else init_seed)
    result = train_stage(model, targets, config, mode="agnostic", with_masks=True)
    leaked = result.seen_ids & set(labeled_ids)
    if leaked:
        raise TrainingError(f"warmup read labeled images {sorted(leaked)[:3]}")
    result.checkpoint = to_checkpoint(model, stage="warmup", seed=config.seed, epoch=config.epochs, mode="agnostic")
    return result


def init_finetune_model(
    source: Optional[Checkpoint],
    det_cfg: DetectorConfig,
    init: InitSpec,
    seed: int,
) -> Detector:
    """Fresh ``det_cfg`` model with the parts named by ``init`` taken from ``source``."""
    model = build_detector(det_cfg, seed=seed)
    if not init.parts and init.classifier_init == "random":
        return model
    if source is None:
        raise CheckpointError("a source checkpoint is needed to transfer parts")
    if source.stage not in ("warmup", "labeler"):
        raise CheckpointError(f"finetuning starts from a warmup or labeler checkpoint, got stage {source.stage!r}")
    load_parts(model, source, init.transferred)
    if init.classifier_init == "copy":
        src = source.parts["classifier"]
        w, b = src["conv.weight"], src["conv.bias"]
        if w.shape[0] != 1:
            raise CheckpointError(f"copy init needs a 1-channel agnostic classifier, source has {w.shape[0]}")
        k = det_cfg.num_classes
        with torch.no_grad():
            model.classifier.conv.weight.copy_(torch.from_numpy(np.repeat(w, k, axis=0)))
            model.classifier.conv.bias.copy_(torch.from_numpy(np.repeat(b, k, axis=0)))
    return model


def finetune(
    source: Optional[Checkpoint],
    labeled: DatasetSplit,
    det_cfg: DetectorConfig,
    init: InitSpec,
    config: StageConfig,
    with_masks: bool = True,
    init_seed: Optional[int] = None,
) -> StageResult:
    """Class-specific training on ground truth, starting from parts of ``source``."""
    if labeled.role != "labeled":
        raise ValidationError(f"finetuning needs a labeled split, got {labeled.role!r}")
    model = init_finetune_model(source, det_cfg, init, seed=config.seed if init_seed is None else init_seed)
    result = train_stage(model, labeled, config, mode="specific", with_masks=with_masks)
    result.checkpoint = to_checkpoint(
        model,
        stage="finetuned",
        seed=config.seed,
        epoch=config.epochs,
        mode="specific",
        init_parts=sorted(init.parts),
        classifier_init=init.classifier_init,
    )
    return result
