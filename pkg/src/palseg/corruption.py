"""Synthetic label noise: seeded morphological erosion/dilation of whole annotations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datasets import Dataset, fraction_count


class CorruptionError(ValueError):
    pass


class AlreadyCorruptedError(CorruptionError):
    """Corruption is applied once, to clean data only."""


class OpPolicy(str, Enum):
    ERODE = "erode"
    DILATE = "dilate"
    RANDOM_EITHER = "random_either"


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float
    radius_min: int
    radius_max: int
    op_policy: OpPolicy = OpPolicy.RANDOM_EITHER
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "op_policy", OpPolicy(self.op_policy))
        if not 0.0 <= self.fraction <= 1.0:
            raise CorruptionError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.radius_min < 1:
            raise CorruptionError(f"radius_min must be >= 1, got {self.radius_min}")
        if self.radius_max < self.radius_min:
            raise CorruptionError(f"radius_max ({self.radius_max}) < radius_min ({self.radius_min})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op_policy"] = self.op_policy.value
        return d


@dataclass(frozen=True)
class CorruptionRecord:
    sample_id: str
    op: str
    radius: int
    emptied_classes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "op": self.op, "radius": self.radius,
                "emptied_classes": list(self.emptied_classes)}


def disk(radius: int) -> np.ndarray:
    """Discretised Euclidean disk: offsets (dy, dx) with dy^2 + dx^2 <= r^2."""
    if radius < 1:
        raise CorruptionError(f"radius must be >= 1, got {radius}")
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def dilate(mask: np.ndarray, r: int) -> np.ndarray:
    return ndimage.binary_dilation(mask.astype(bool), structure=disk(r)).astype(np.uint8)


def erode(mask: np.ndarray, r: int) -> np.ndarray:
    # Outside the image counts as background, so structures shrink at the border.
    return ndimage.binary_erosion(mask.astype(bool), structure=disk(r), border_value=0).astype(np.uint8)


_OPS = {"erode": erode, "dilate": dilate}


def corrupt(d: Dataset, spec: NoiseSpec) -> tuple[Dataset, list[CorruptionRecord]]:
    """Erode or dilate the annotations of ``fraction_count(spec.fraction, N)`` samples.

    Selection is uniform without replacement. Op and radius are drawn per selected
    sample, in dataset order, and applied to every class channel of that sample.
    """
    if len(d) == 0:
        raise CorruptionError("cannot corrupt an empty dataset")
    if d.is_corrupted:
        raise AlreadyCorruptedError("dataset already carries corrupted samples")

    rng = np.random.default_rng(spec.seed)
    k = fraction_count(spec.fraction, len(d))
    chosen = np.sort(rng.choice(len(d), size=k, replace=False)) if k else np.array([], dtype=int)

    draws = []
    for _ in chosen:
        if spec.op_policy is OpPolicy.RANDOM_EITHER:
            op = "erode" if rng.random() < 0.5 else "dilate"
        else:
            op = spec.op_policy.value
        draws.append((op, int(rng.integers(spec.radius_min, spec.radius_max + 1))))

    samples = list(d.samples)
    records = []
    for i, (op, r) in zip(chosen, draws):
        s = samples[i]
        noisy = np.stack([_OPS[op](m, r) for m in s.masks])
        emptied = tuple(name for name, before, after in zip(d.class_names, s.masks, noisy)
                        if before.any() and not after.any())
        samples[i] = replace(s, masks=noisy, corrupted=True, clean_masks=s.masks)
        records.append(CorruptionRecord(s.id, op, r, emptied))

    meta = {**d.metadata, "noise": spec.to_dict()}
    return Dataset(tuple(samples), d.class_names, meta), records


def write_manifest(path: str | Path, spec: NoiseSpec, records: list[CorruptionRecord]) -> Path:
    path = Path(path)
    payload = {"noise_spec": spec.to_dict(), "records": [r.to_dict() for r in records]}
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def read_manifest(path: str | Path) -> tuple[NoiseSpec, list[CorruptionRecord]]:
    payload = json.loads(Path(path).read_text())
    spec = NoiseSpec(**payload["noise_spec"])
    records = [CorruptionRecord(r["sample_id"], r["op"], int(r["radius"]), tuple(r["emptied_classes"]))
               for r in payload["records"]]
    return spec, records
