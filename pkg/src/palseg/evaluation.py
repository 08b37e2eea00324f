"""Dice evaluation and Table-style result aggregation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import Dataset
from .models import UNet, seg_forward

log = logging.getLogger(__name__)


def binarize(prob_map, threshold: float = 0.5):
    """prob >= threshold -> 1, else 0 (ties go to foreground)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if isinstance(prob_map, torch.Tensor):
        return (prob_map >= threshold).to(torch.uint8)
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks agree perfectly and score 1.0."""
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


@dataclass
class DiceReport:
    per_class: dict[str, float]
    n_samples: int = 0

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_class.values())))

    def to_dict(self) -> dict:
        return {"per_class": dict(self.per_class), "average": self.average, "n_samples": self.n_samples}


def _batch_dice(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorised Dice over (B, C, H, W) -> (B, C), same empty convention as ``dice``."""
    p, g = pred.astype(bool), gt.astype(bool)
    inter = np.logical_and(p, g).sum(axis=(2, 3))
    total = p.sum(axis=(2, 3)) + g.sum(axis=(2, 3))
    out = np.ones(total.shape)
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out


@torch.no_grad()
def evaluate_model(net: UNet, d: Dataset, batch_size: int = 32, threshold: float = 0.5) -> DiceReport:
    """Mean per-sample Dice per class against the clean labels of ``d``."""
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    scores = []
    try:
        for start in range(0, len(d), batch_size):
            chunk = d.samples[start:start + batch_size]
            images = torch.from_numpy(np.stack([s.image for s in chunk])[:, None]).to(dtype)
            gt = np.stack([s.label_masks for s in chunk])
            pred = binarize(torch.sigmoid(seg_forward(net, images)), threshold).numpy()
            scores.append(_batch_dice(pred, gt))
    finally:
        net.train(was_training)
    per = np.concatenate(scores).mean(axis=0)
    return DiceReport({name: float(v) for name, v in zip(d.class_names, per)}, len(d))


# --------------------------------------------------------------------------- results table


@dataclass
class ResultRow:
    run: str
    noise_fraction: float
    radius_range: str
    strategy: str
    per_class: dict[str, float]
    average: float
    epoch: int


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def class_names(self) -> list[str]:
        names: list[str] = []
        for r in self.rows:
            names += [c for c in r.per_class if c not in names]
        return names

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        classes = self.class_names
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["run", "noise_fraction", "radius_range", "strategy", *classes, "average", "best_epoch"])
            for r in self.rows:
                w.writerow([r.run, f"{r.noise_fraction:g}", r.radius_range, r.strategy,
                            *(f"{r.per_class.get(c, float('nan')):.4f}" for c in classes),
                            f"{r.average:.4f}", r.epoch])
        return path

    def render(self) -> str:
        classes = self.class_names
        header = ["Noise", "Radius", "Strategy", *(c.capitalize() for c in classes), "Average"]
        body = [[f"{r.noise_fraction:.0%}" if r.noise_fraction else "No noise", r.radius_range, r.strategy,
                 *(f"{r.per_class.get(c, float('nan')):.3f}" for c in classes), f"{r.average:.3f}"]
                for r in self.rows]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule, *map(fmt, body)]) + "\n"


_STRATEGY_ORDER = {"baseline": 0, "qam": 1, "qam_ocm": 2}


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def results_table(run_dirs: Sequence[str | Path]) -> ResultsTable:
    """One row per run from its best eval epoch, sorted by (noise, radius range, strategy)."""
    table = ResultsTable()
    for run in map(Path, run_dirs):
        metrics, cfg_path = run / "metrics.csv", run / "config.json"
        if not metrics.exists() or not cfg_path.exists():
            log.warning("skipping %s: missing metrics.csv or config.json", run)
            table.skipped.append(str(run))
            continue
        rows = [r for r in read_metrics(metrics) if r["split"] == "eval"]
        if not rows:
            log.warning("skipping %s: no eval rows", run)
            table.skipped.append(str(run))
            continue
        cfg = json.loads(cfg_path.read_text())
        best = max(rows, key=lambda r: (float(r["dice_average"]), -int(r["epoch"])))
        per_class = {k[len("dice_"):]: float(v) for k, v in best.items()
                     if k.startswith("dice_") and k != "dice_average"}
        noise = cfg.get("noise") or {}
        fraction = float(noise.get("fraction", 0.0))
        radius = f"{noise['radius_min']}-{noise['radius_max']}" if fraction > 0 else "-"
        table.rows.append(ResultRow(run.name, fraction, radius, cfg["train"]["strategy"],
                                    per_class, float(best["dice_average"]), int(best["epoch"])))
    table.rows.sort(key=lambda r: (r.noise_fraction, r.radius_range, _STRATEGY_ORDER.get(r.strategy, 9), r.run))
    return table
