"""Experiment configuration and its flat INI file format."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from .datamodel import PARTS, DetectorConfig
from .detector import LossWeights
from .synthgen import SynthSpec
from .trainer import InitSpec, StageConfig

LABEL_MODES = ("objects", "entities")
STAGE_SECTIONS = ("labeler", "warmup", "finetune")

# image-index offsets keep the three synthetic pools disjoint whatever their sizes
UNLABELED_START = 100_000
TEST_START = 1_000_000


@dataclass(frozen=True)
class DataConfig:
    labeled: int = 200
    unlabeled: int = 800
    test: int = 200
    image_size: int = 64
    max_things: int = 5
    noise: float = 0.05

    def __post_init__(self) -> None:
        for name in ("labeled", "unlabeled", "test"):
            if getattr(self, name) < 0:
                raise ValueError(f"data.{name} must be >= 0")
        if self.labeled + self.unlabeled > UNLABELED_START or self.unlabeled > TEST_START - UNLABELED_START:
            raise ValueError("split sizes overflow the reserved index ranges")

    def synth_spec(self, seed: int, num_images: int) -> SynthSpec:
        return SynthSpec(
            height=self.image_size,
            width=self.image_size,
            num_images=num_images,
            max_things=self.max_things,
            noise=self.noise,
            seed=seed,
        )


@dataclass(frozen=True)
class EvalConfig:
    score_floor: float = 0.05
    nms_iou: float = 0.6
    # only detections above this score enter the panoptic (PQ) output
    pq_threshold: float = 0.4
    max_detections: Optional[int] = None
    area_small: float = 8.0**2
    area_medium: float = 20.0**2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    label_mode: str = "entities"
    delta: float = 0.4
    out: str = "runs/default"
    data: DataConfig = DataConfig()
    detector: DetectorConfig = DetectorConfig()
    labeler: StageConfig = StageConfig(epochs=60, lr=0.02)
    warmup: StageConfig = StageConfig(epochs=25, lr=0.02)
    finetune: StageConfig = StageConfig(epochs=15, lr=0.02)
    init: InitSpec = InitSpec()
    evaluation: EvalConfig = EvalConfig()

    def __post_init__(self) -> None:
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.data.labeled < 1:
            raise ValueError("at least one labeled image is needed")

    def stage(self, name: str) -> StageConfig:
        """The stage's training config, seeded from the experiment seed."""
        return replace(getattr(self, name), seed=self.seed)

    @property
    def num_thing_classes(self) -> int:
        return len(SynthSpec().thing_classes)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "label_mode": self.label_mode,
            "delta": self.delta,
            "out": self.out,
            "data": dataclasses.asdict(self.data),
            "detector": self.detector.to_dict(),
            "init": {"parts": [p for p in PARTS if p in self.init.parts], "classifier_init": self.init.classifier_init},
            "evaluation": dataclasses.asdict(self.evaluation),
        }
        for name in STAGE_SECTIONS:
            d[name] = _stage_to_dict(getattr(self, name))
        return d

    def digest(self) -> str:
        """Hash of everything that determines results (the output directory excluded)."""
        d = self.to_dict()
        d.pop("out")
        return digest_of(d)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        d = self.to_dict()
        cp["experiment"] = {k: _fmt(d[k]) for k in ("seed", "label_mode", "delta", "out")}
        for section in ("data", "detector", "evaluation", *STAGE_SECTIONS):
            cp[section] = {k: _fmt(v) for k, v in d[section].items()}
        cp["finetune"].update({"init_parts": ",".join(d["init"]["parts"]), "classifier_init": d["init"]["classifier_init"]})
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        known = {"experiment", "data", "detector", "evaluation", *STAGE_SECTIONS}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        base = cls()
        kw: dict[str, Any] = {}
        if cp.has_section("experiment"):
            sec = dict(cp["experiment"])
            for key in list(sec):
                if key not in ("seed", "label_mode", "delta", "out"):
                    raise ValueError(f"unknown key experiment.{key}")
                kw[key] = _parse(sec[key], getattr(base, key))
        if cp.has_section("data"):
            kw["data"] = _update(base.data, dict(cp["data"]), "data")
        if cp.has_section("evaluation"):
            kw["evaluation"] = _update(base.evaluation, dict(cp["evaluation"]), "evaluation")
        if cp.has_section("detector"):
            det = base.detector.to_dict()
            for key, value in cp["detector"].items():
                if key not in det:
                    raise ValueError(f"unknown key detector.{key}")
                det[key] = json.loads(value) if value.strip().startswith("[") else _parse(value, det[key])
            kw["detector"] = DetectorConfig.from_dict(det)
        for name in STAGE_SECTIONS:
            if not cp.has_section(name):
                continue
            sec = dict(cp[name])
            if name == "finetune":
                parts = sec.pop("init_parts", None)
                init = sec.pop("classifier_init", None)
                if parts is not None or init is not None:
                    kw["init"] = InitSpec(
                        parse_parts(parts) if parts is not None else base.init.parts,
                        init if init is not None else base.init.classifier_init,
                    )
            kw[name] = _stage_from_dict(getattr(base, name), sec, name)
        return cls(**kw)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())


def parse_parts(text: str) -> frozenset:
    """``"backbone,neck"`` style part lists; ``"none"`` and ``"all"`` are shorthands."""
    text = text.strip()
    if text in ("", "none"):
        return frozenset()
    if text == "all":
        return frozenset(PARTS)
    parts = frozenset(p.strip() for p in text.split(",") if p.strip())
    if parts - set(PARTS):
        raise ValueError(f"unknown parts {sorted(parts - set(PARTS))}; choose from {', '.join(PARTS)}")
    return parts


def digest_of(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(obj: Any) -> Any:
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _stage_to_dict(cfg: StageConfig) -> dict:
    d = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "seed":
            continue  # always taken from the experiment seed
        if f.name == "weights":
            d.update({f"weight_{k}": w for k, w in dataclasses.asdict(v).items()})
        else:
            d[f.name] = list(v) if isinstance(v, tuple) else v
    return d


def _stage_from_dict(base: StageConfig, values: dict, section: str) -> StageConfig:
    kw: dict[str, Any] = {}
    weights = dataclasses.asdict(base.weights)
    names = {f.name for f in fields(base)} - {"seed", "weights"}
    for key, value in values.items():
        if key.startswith("weight_") and key[7:] in weights:
            weights[key[7:]] = float(value)
        elif key in names:
            kw[key] = _parse(value, getattr(base, key))
        else:
            raise ValueError(f"unknown key {section}.{key}")
    return replace(base, weights=LossWeights(**weights), **kw)


def _update(base: Any, values: dict, section: str) -> Any:
    names = {f.name for f in fields(base)}
    kw = {}
    for key, value in values.items():
        if key not in names:
            raise ValueError(f"unknown key {section}.{key}")
        kw[key] = _parse(value, getattr(base, key))
    return replace(base, **kw)


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        if any(isinstance(x, (list, tuple)) for x in v):
            return json.dumps(v)
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, default: Any) -> Any:
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) or (default is None and text.lstrip("-").isdigit()):
        return int(text)
    if isinstance(default, float) or default is None:
        return float(text)
    if isinstance(default, (tuple, list)):
        if text.startswith("["):
            return tuple(json.loads(text))
        items = [x.strip() for x in text.split(",") if x.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(x) for x in items)
    return text
