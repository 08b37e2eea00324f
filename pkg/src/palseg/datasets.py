"""Segmentation datasets: synthetic shapes, JSRT/SCR ingestion, resizing, splitting, batching.

Images are float arrays of shape (H, W) in [0, 1]. Masks are uint8 arrays of shape
(n_classes, H, W) with values in {0, 1}; channels may overlap (multi-label).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

MIN_SIZE = 16

# SCR structure folder -> Table-1 class column.
JSRT_GROUPING = {
    "left lung": "lungs",
    "right lung": "lungs",
    "heart": "heart",
    "left clavicle": "clavicles",
    "right clavicle": "clavicles",
}

IMAGE_EXTS = (".png", ".gif", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def fraction_count(fraction: float, n: int) -> int:
    """round_half_up(fraction * n), evaluated in decimal so 0.5 * 165 gives 83."""
    return int((Decimal(repr(fraction)) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray
    masks: np.ndarray
    corrupted: bool = False
    clean_masks: np.ndarray | None = None

    def __post_init__(self):
        img, masks = self.image, self.masks
        if img.ndim != 2:
            raise DatasetError(f"{self.id}: image must be 2-D, got shape {img.shape}")
        if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
            raise DatasetError(f"{self.id}: image smaller than {MIN_SIZE}x{MIN_SIZE}")
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise DatasetError(f"{self.id}: image values must be finite and in [0, 1]")
        if masks.ndim != 3 or masks.shape[1:] != img.shape:
            raise DatasetError(f"{self.id}: mask shape {masks.shape} does not match image {img.shape}")
        if masks.dtype != np.uint8 or masks.max(initial=0) > 1:
            raise DatasetError(f"{self.id}: masks must be uint8 with values in {{0, 1}}")
        if self.corrupted:
            if self.clean_masks is None or self.clean_masks.shape != masks.shape:
                raise DatasetError(f"{self.id}: corrupted sample needs shape-identical clean_masks")
        elif self.clean_masks is not None:
            raise DatasetError(f"{self.id}: clean_masks given for an uncorrupted sample")

    @property
    def label_masks(self) -> np.ndarray:
        """The clean annotation: ``clean_masks`` when corrupted, else ``masks``."""
        return self.clean_masks if self.corrupted else self.masks


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids must be unique")
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            log.debug("dataset has mixed spatial shapes %s", shapes)
        for s in self.samples:
            if s.masks.shape[0] != len(self.class_names):
                raise DatasetError(f"{s.id}: {s.masks.shape[0]} mask channels for {len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) != 1:
            raise DatasetError(f"samples do not share one spatial shape: {sorted(shapes)}")
        return next(iter(shapes))

    @property
    def is_corrupted(self) -> bool:
        return any(s.corrupted for s in self.samples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.class_names, dict(self.metadata))

    def fingerprint(self) -> str:
        """SHA-256 over ids, class names, pixel data and corruption provenance."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.class_names)).encode())
        for s in self.samples:
            h.update(s.id.encode())
            h.update(np.ascontiguousarray(s.image, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(s.masks).tobytes())
            h.update(b"\x01" if s.corrupted else b"\x00")
            if s.clean_masks is not None:
                h.update(np.ascontiguousarray(s.clean_masks).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise DatasetError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class Batch:
    samples: tuple[Sample, ...]
    partial: bool
    index: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.stack([s.image for s in self.samples])[:, None]).to(dtype)

    def masks(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.stack([s.masks for s in self.samples])).to(dtype)


# --------------------------------------------------------------------------- synthetic


def _ellipse(size: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    field_ = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def generate_synthetic(count: int, size: int, n_classes: int, seed: int) -> Dataset:
    """Deterministic ellipse-shapes dataset.

    Each sample holds one rotated filled ellipse per class (class k drawn in mask
    channel k). The image is a background level plus the sum of the per-class
    intensities over their ellipses, plus smooth and pixel-level Gaussian texture,
    clipped to [0, 1].
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    if n_classes < 1:
        raise DatasetError(f"n_classes must be >= 1, got {n_classes}")
    if size < MIN_SIZE:
        raise DatasetError(f"size must be >= {MIN_SIZE} for ellipse placement, got {size}")

    rng = np.random.default_rng(seed)
    names = tuple(f"class{k}" for k in range(n_classes))
    lo, hi = 0.12 * size, 0.26 * size
    samples = []
    for i in range(count):
        masks = np.zeros((n_classes, size, size), dtype=np.uint8)
        image = np.full((size, size), rng.uniform(0.1, 0.3))
        for k in range(n_classes):
            ay, ax = rng.uniform(lo, hi, size=2)
            reach = max(ay, ax) + 1
            cy, cx = rng.uniform(reach, size - 1 - reach, size=2)
            theta = rng.uniform(0, math.pi)
            m = _ellipse(size, cy, cx, ay, ax, theta)
            masks[k] = m
            image += rng.uniform(0.25, 0.45) * m
        image += 0.06 * _smooth_noise(rng, size, sigma=size / 16)
        image += 0.05 * rng.standard_normal((size, size))
        samples.append(Sample(f"syn{i:05d}", np.clip(image, 0.0, 1.0), masks))
    return Dataset(tuple(samples), names, {"source": "synthetic", "size": size, "seed": seed})


# --------------------------------------------------------------------------- JSRT / SCR


def _find_image(folder: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTS:
        p = folder / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("F" if im.mode in ("I", "I;16", "F") else "L"), dtype=np.float64)


def _minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def load_grouping(path: str | Path) -> dict[str, str]:
    with open(path) as f:
        grouping = json.load(f)
    if not isinstance(grouping, dict) or not all(isinstance(v, str) for v in grouping.values()):
        raise DatasetError(f"{path}: grouping must map structure names to class names")
    return grouping


def load_jsrt(image_dir: str | Path, mask_dir: str | Path,
              class_grouping: Mapping[str, str] = JSRT_GROUPING) -> Dataset:
    """Load pre-converted JSRT radiographs with SCR per-structure masks.

    Expected layout::

        image_dir/JPCLN001.png
        mask_dir/<structure>/JPCLN001.gif     # one folder per key of class_grouping

    Structures mapping to the same class are merged by pixelwise OR. Images are
    min-max normalised to [0, 1] per image. Samples missing any structure mask are
    skipped; the count is reported in ``metadata["skipped"]``.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for p in (image_dir, mask_dir):
        if not p.is_dir():
            raise FileNotFoundError(f"directory not found: {p}")
    class_names = tuple(dict.fromkeys(class_grouping.values()))
    structures = list(class_grouping)

    samples, skipped = [], 0
    for img_path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS):
        stem = img_path.stem
        paths = {st: _find_image(mask_dir / st, stem) for st in structures}
        if any(p is None for p in paths.values()):
            skipped += 1
            continue
        image = _read_gray(img_path)
        masks = np.zeros((len(class_names),) + image.shape, dtype=np.uint8)
        for st, p in paths.items():
            m = _read_gray(p) > 0
            if m.shape != image.shape:
                raise DatasetError(f"{p}: mask shape {m.shape} does not match image shape {image.shape}")
            masks[class_names.index(class_grouping[st])] |= m.astype(np.uint8)
        samples.append(Sample(stem, _minmax(image), masks))

    if skipped:
        log.warning("skipped %d images with missing structure masks", skipped)
    if not samples:
        raise DatasetError(f"no samples loaded from {image_dir}")
    return Dataset(tuple(samples), class_names,
                   {"source": "jsrt", "skipped": skipped, "grouping": dict(class_grouping)})


# --------------------------------------------------------------------------- preprocessing


def _pad_square(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    side = max(h, w)
    pad = [(0, 0)] * (a.ndim - 2) + [((side - h) // 2, side - h - (side - h) // 2),
                                      ((side - w) // 2, side - w - (side - w) // 2)]
    return np.pad(a, pad)


def _resize_image(img: np.ndarray, target: int) -> np.ndarray:
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((target, target), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)


def _resize_masks(masks: np.ndarray, target: int) -> np.ndarray:
    return np.stack([
        np.asarray(Image.fromarray(m * 255).resize((target, target), Image.NEAREST)) // 255
        for m in masks
    ]).astype(np.uint8)


def resize_dataset(d: Dataset, target: int, pad: str | None = None) -> Dataset:
    """Resize to target x target: bilinear for images, nearest-neighbour for masks.

    Non-square inputs are rejected unless ``pad="zero"``, which centres them on a
    zero canvas first.
    """
    if target < MIN_SIZE:
        raise DatasetError(f"target must be >= {MIN_SIZE}, got {target}")
    if pad not in (None, "zero"):
        raise DatasetError(f"unknown pad policy {pad!r}")

    out = []
    for s in d.samples:
        image, masks, clean = s.image, s.masks, s.clean_masks
        if image.shape[0] != image.shape[1]:
            if pad is None:
                raise DatasetError(f"{s.id}: non-square image {image.shape} needs a pad policy")
            image, masks = _pad_square(image), _pad_square(masks)
            clean = None if clean is None else _pad_square(clean)
        if image.shape[0] == target:
            out.append(s if image is s.image else replace(s, image=image, masks=masks, clean_masks=clean))
            continue
        out.append(replace(
            s,
            image=_resize_image(image, target),
            masks=_resize_masks(masks, target),
            clean_masks=None if clean is None else _resize_masks(clean, target),
        ))
    return Dataset(tuple(out), d.class_names, {**d.metadata, "size": target})


def split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded random partition into (train, test); each side keeps the input order."""
    n = len(d)
    n_train = fraction_count(spec.train_fraction, n)
    if n_train <= 0 or n_train >= n:
        raise DatasetError(f"train_fraction {spec.train_fraction} leaves an empty side for N={n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return d.subset(sorted(perm[:n_train])), d.subset(sorted(perm[n_train:]))


def batch_iterator(d: Dataset, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Batches over a permutation that depends only on (seed, epoch).

    The trailing short batch is kept and flagged ``partial``.
    """
    n = len(d)
    if not 1 <= batch_size <= n:
        raise DatasetError(f"batch_size must be in [1, {n}], got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = []
    for b, start in enumerate(range(0, n, batch_size)):
        idx = perm[start:start + batch_size]
        batches.append(Batch(tuple(d.samples[i] for i in idx), len(idx) < batch_size, b))
    return batches


# --------------------------------------------------------------------------- persistence


def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, optimize=False)


def save_dataset(d: Dataset, out_dir: str | Path) -> Path:
    """Write ``images/``, ``masks/`` (and ``clean_masks/`` if corrupted) plus ``dataset.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    corrupted = [s.id for s in d.samples if s.corrupted]
    if corrupted:
        (out / "clean_masks").mkdir(exist_ok=True)
    for s in d.samples:
        _save_png(out / "images" / f"{s.id}.png", np.round(s.image * 255).astype(np.uint8))
        for k, name in enumerate(d.class_names):
            _save_png(out / "masks" / f"{s.id}_{name}.png", s.masks[k] * 255)
            if s.corrupted:
                _save_png(out / "clean_masks" / f"{s.id}_{name}.png", s.clean_masks[k] * 255)
    h, w = d.spatial_shape
    manifest = {
        "ids": d.ids,
        "class_names": list(d.class_names),
        "size": [h, w],
        "seed": d.metadata.get("seed"),
        "corrupted": corrupted,
        "metadata": {k: v for k, v in d.metadata.items() if k not in ("seed",)},
    }
    path = out / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_mask_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def load_dataset(in_dir: str | Path) -> Dataset:
    root = Path(in_dir)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    names = manifest["class_names"]
    corrupted = set(manifest.get("corrupted", []))
    samples = []
    for sid in manifest["ids"]:
        image = np.asarray(Image.open(root / "images" / f"{sid}.png").convert("L"), dtype=np.float64) / 255.0
        masks = np.stack([_load_mask_png(root / "masks" / f"{sid}_{c}.png") for c in names])
        clean = None
        if sid in corrupted:
            clean = np.stack([_load_mask_png(root / "clean_masks" / f"{sid}_{c}.png") for c in names])
        samples.append(Sample(sid, image, masks, sid in corrupted, clean))
    meta = dict(manifest.get("metadata", {}))
    meta["seed"] = manifest.get("seed")
    return Dataset(tuple(samples), tuple(names), meta)
