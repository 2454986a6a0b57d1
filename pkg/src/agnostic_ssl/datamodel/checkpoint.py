"""Checkpoint archives: one named array per parameter plus a JSON record."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

PARTS = ("backbone", "neck", "head", "classifier")
STAGES = ("labeler", "warmup", "finetuned", "init")

_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    parts: dict[str, dict[str, np.ndarray]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.parts) - set(PARTS)
        if unknown:
            raise CheckpointError(f"unknown checkpoint parts {sorted(unknown)}")

    @property
    def stage(self) -> Optional[str]:
        return self.metadata.get("stage")

    def save(self, path: Union[str, os.PathLike]) -> None:
        missing = set(PARTS) - set(self.parts)
        if missing:
            raise CheckpointError(f"cannot save checkpoint without parts {sorted(missing)}")
        arrays = {}
        for part in PARTS:
            for name, arr in self.parts[part].items():
                arrays[f"{part}/{name}"] = np.asarray(arr)
        arrays[_META_KEY] = np.array(json.dumps(self.metadata, sort_keys=True))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path: Union[str, os.PathLike], parts_filter: Optional[Iterable[str]] = None) -> "Checkpoint":
        """Load the requested parts (all four by default)."""
        wanted = set(PARTS if parts_filter is None else parts_filter)
        unknown = wanted - set(PARTS)
        if unknown:
            raise CheckpointError(f"unknown checkpoint parts {sorted(unknown)}")
        with np.load(Path(path), allow_pickle=False) as z:
            metadata = json.loads(str(z[_META_KEY])) if _META_KEY in z.files else {}
            parts: dict[str, dict[str, np.ndarray]] = {p: {} for p in PARTS if p in wanted}
            present = set()
            for key in z.files:
                if key == _META_KEY:
                    continue
                part, name = key.split("/", 1)
                present.add(part)
                if part in parts:
                    parts[part][name] = z[key]
        absent = wanted - present
        if absent:
            raise CheckpointError(f"checkpoint {path} lacks parts {sorted(absent)}")
        return cls(parts=parts, metadata=metadata)
