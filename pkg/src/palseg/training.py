"""Joint training of the segmentation and quality networks on one re-weighted loss."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import Batch, Dataset, batch_iterator
from .evaluation import DiceReport, evaluate_model
from .models import (
    DivergenceError,
    QualityNet,
    UNet,
    build_qam,
    build_segnet,
    configs_from_profile,
    load_profile,
    profile_hash,
    qam_forward,
    seg_forward,
)
from .numerics import default_precision, torch_dtype
from .reweighting import DEFAULT_LAMBDA, Strategy, combine_loss, compute_weights

log = logging.getLogger(__name__)


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "qam_ocm"
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 120
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    loss_kind: str = "bce"
    patience: int | None = 30
    precision: str = field(default_factory=default_precision)
    profile: str = "desk"
    eval_batch_size: int = 32

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy).value
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.loss_kind != "bce":
            raise ValueError(f"unsupported loss_kind {self.loss_kind!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 or null")
        torch_dtype(self.precision)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.precision)


@dataclass
class TrainState:
    config: TrainConfig
    segnet: UNet
    seg_opt: torch.optim.Optimizer
    qam: QualityNet | None
    qam_opt: torch.optim.Optimizer | None
    profile: dict
    epoch: int = 0
    global_step: int = 0
    best_dice: float = -math.inf
    best_epoch: int = -1

    @property
    def strategy(self) -> Strategy:
        return Strategy.parse(self.config.strategy)

    @property
    def profile_hash(self) -> str:
        return profile_hash(self.profile)


@dataclass
class StepRecord:
    step: int
    epoch: int
    partial: bool
    scalar_loss: float
    per_sample: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WeightStats:
    step: int
    epoch: int
    mean_clean: float
    mean_noisy: float
    var_clean: float
    var_noisy: float
    ratio: float | None


@dataclass
class RunArtifacts:
    out_dir: Path | None
    records: list[StepRecord]
    eval_reports: list[DiceReport]
    weight_stats: list[WeightStats]
    stopped_early: bool = False


def init_state(cfg: TrainConfig, n_classes: int, profile: dict | None = None, in_channels: int = 1) -> TrainState:
    profile = load_profile() if profile is None else profile
    seg_cfg, qam_cfg = configs_from_profile(profile, cfg.profile, n_classes, in_channels)
    segnet = build_segnet(seg_cfg, cfg.seed, cfg.dtype)
    seg_opt = torch.optim.Adam(segnet.parameters(), lr=cfg.learning_rate)
    qam = qam_opt = None
    if Strategy.parse(cfg.strategy).uses_qam:
        qam = build_qam(qam_cfg, cfg.seed + 1, cfg.dtype)
        qam_opt = torch.optim.Adam(qam.parameters(), lr=cfg.learning_rate)
    return TrainState(cfg, segnet, seg_opt, qam, qam_opt, profile)


def clone_state(state: TrainState) -> TrainState:
    return _state_from_blob(_state_blob(state), state.config, state.profile)


def per_sample_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Pixel- and channel-averaged binary cross-entropy, one value per sample."""
    if logits.shape != masks.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and masks {tuple(masks.shape)} differ")
    losses = F.binary_cross_entropy_with_logits(logits, masks.to(logits.dtype), reduction="none")
    losses = losses.flatten(1).mean(dim=1)
    if not torch.isfinite(losses).all():
        raise DivergenceError("non-finite per-sample loss")
    return losses


def train_step(state: TrainState, batch: Batch) -> StepRecord:
    """One optimiser step on both networks from the single re-weighted loss.

    Updates ``state`` in place and returns the per-sample record of the step.
    """
    dtype = state.config.dtype
    images, masks = batch.images(dtype), batch.masks(dtype)
    state.segnet.train()
    losses = per_sample_loss(seg_forward(state.segnet, images), masks)

    if state.qam is not None:
        state.qam.train()
        scores = qam_forward(state.qam, images, masks)
    else:
        scores = torch.zeros(len(batch), dtype=dtype)
    weights = compute_weights(scores, state.strategy, state.config.lam)
    loss = combine_loss(weights, losses)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {state.global_step + 1}")

    state.seg_opt.zero_grad(set_to_none=True)
    if state.qam_opt is not None:
        state.qam_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.seg_opt.step()
    if state.qam_opt is not None:
        state.qam_opt.step()
    state.global_step += 1

    t = scores.detach().tolist()
    w = weights.detach().tolist()
    L = losses.detach().tolist()
    per_sample = [
        {"sample_id": s.id, "raw_score": t[i] if state.qam is not None else None,
         "weight": w[i], "loss": L[i], "corrupted": s.corrupted}
        for i, s in enumerate(batch.samples)
    ]
    return StepRecord(state.global_step, state.epoch, batch.partial, float(loss.detach()), per_sample)


def track_group_weights(records: Iterable[StepRecord], corrupted_ids: Iterable[str] | None = None,
                        window: str = "epoch") -> list[WeightStats]:
    """Mean and variance of relative weight B * w_i for clean and noisy samples per window.

    Partial batches are left out. ``corrupted_ids`` defaults to the per-sample flags
    carried by the records. ``window`` is "epoch" or "step".
    """
    noisy = None if corrupted_ids is None else set(corrupted_ids)
    groups: dict[int, list[StepRecord]] = {}
    for r in records:
        if r.partial:
            continue
        groups.setdefault(r.epoch if window == "epoch" else r.step, []).append(r)

    out = []
    for key in sorted(groups):
        clean_w, noisy_w = [], []
        for r in groups[key]:
            b = len(r.per_sample)
            for p in r.per_sample:
                is_noisy = p["corrupted"] if noisy is None else p["sample_id"] in noisy
                (noisy_w if is_noisy else clean_w).append(b * p["weight"])
        mc = float(np.mean(clean_w)) if clean_w else math.nan
        mn = float(np.mean(noisy_w)) if noisy_w else math.nan
        ratio = mc / mn if clean_w and noisy_w and mn > 0 else None
        last = groups[key][-1]
        out.append(WeightStats(
            step=last.step, epoch=last.epoch, mean_clean=mc, mean_noisy=mn,
            var_clean=float(np.var(clean_w)) if clean_w else math.nan,
            var_noisy=float(np.var(noisy_w)) if noisy_w else math.nan,
            ratio=ratio,
        ))
    return out


# --------------------------------------------------------------------------- checkpoints


def _state_blob(state: TrainState) -> dict:
    return {
        "segnet": state.segnet.state_dict(),
        "seg_opt": state.seg_opt.state_dict(),
        "qam": None if state.qam is None else state.qam.state_dict(),
        "qam_opt": None if state.qam_opt is None else state.qam_opt.state_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "best_dice": state.best_dice,
        "best_epoch": state.best_epoch,
        "profile_hash": state.profile_hash,
    }


def _state_from_blob(blob: dict, cfg: TrainConfig, profile: dict) -> TrainState:
    n_classes = blob["segnet"]["head.weight"].shape[0]
    in_channels = blob["segnet"]["down.0.0.weight"].shape[1]
    state = init_state(cfg, n_classes, profile, in_channels)
    state.segnet.load_state_dict(copy.deepcopy(blob["segnet"]))
    state.seg_opt.load_state_dict(copy.deepcopy(blob["seg_opt"]))
    if state.qam is not None:
        if blob["qam"] is None:
            raise CheckpointError("checkpoint has no quality network for a QAM strategy")
        state.qam.load_state_dict(copy.deepcopy(blob["qam"]))
        state.qam_opt.load_state_dict(copy.deepcopy(blob["qam_opt"]))
    state.epoch = blob["epoch"]
    state.global_step = blob["global_step"]
    state.best_dice = blob["best_dice"]
    state.best_epoch = blob["best_epoch"]
    return state


def save_checkpoint(state: TrainState, ckpt_dir: str | Path) -> Path:
    """Write ``state.pt`` (parameters, optimiser state, counters) and ``checkpoint_meta.json``."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(_state_blob(state), buf)
    (ckpt_dir / "state.pt").write_bytes(buf.getvalue())
    meta = {
        "config": state.config.to_dict(),
        "profile": state.profile,
        "profile_hash": state.profile_hash,
        "epoch": state.epoch,
        "step": state.global_step,
    }
    (ckpt_dir / "checkpoint_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path, profile: dict | None = None) -> TrainState:
    """Restore a TrainState; refuses when the architecture profile hash does not match.

    ``profile`` defaults to the packaged ``model_profile.json``.
    """
    ckpt_dir = Path(ckpt_dir)
    try:
        meta = json.loads((ckpt_dir / "checkpoint_meta.json").read_text())
        blob = torch.load(ckpt_dir / "state.pt", map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:  # noqa: BLE001 - torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"cannot read checkpoint in {ckpt_dir}: {e}") from e
    profile = load_profile() if profile is None else profile
    expected = profile_hash(profile)
    if meta.get("profile_hash") != expected or blob.get("profile_hash") != expected:
        raise CheckpointError(
            f"model profile hash mismatch: checkpoint {meta.get('profile_hash')!r}, current {expected!r}")
    cfg = TrainConfig.from_dict(meta["config"])
    return _state_from_blob(blob, cfg, profile)


# --------------------------------------------------------------------------- training loop


class _RunWriter:
    """Appends metrics.csv / steps.jsonl / weight_stats.csv rows under one run dir."""

    def __init__(self, out_dir: Path | None, class_names: Sequence[str]):
        self.out_dir = out_dir
        self.class_names = list(class_names)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

    def _append_csv(self, name: str, header: list[str], row: list) -> None:
        path = self.out_dir / name
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(header)
            w.writerow(row)

    def steps(self, records: list[StepRecord]) -> None:
        if self.out_dir is None:
            return
        with open(self.out_dir / "steps.jsonl", "a") as f:
            for r in records:
                f.write(json.dumps(r.to_dict()) + "\n")

    def metrics(self, epoch: int, report: DiceReport, mean_loss: float) -> None:
        if self.out_dir is None:
            return
        header = ["epoch", "split", *(f"dice_{c}" for c in self.class_names), "dice_average", "mean_loss"]
        row = [epoch, "eval", *(repr(report.per_class[c]) for c in self.class_names),
               repr(report.average), repr(mean_loss)]
        self._append_csv("metrics.csv", header, row)

    def weight_stats(self, stats: list[WeightStats]) -> None:
        if self.out_dir is None:
            return
        header = [f.name for f in fields(WeightStats)]
        for s in stats:
            self._append_csv("weight_stats.csv", header, [getattr(s, h) for h in header])


def train(cfg: TrainConfig, train_set: Dataset, eval_set: Dataset, out_dir: str | Path | None = None,
          state: TrainState | None = None, profile: dict | None = None) -> tuple[TrainState, RunArtifacts]:
    """Run ``cfg.epochs`` epochs (or resume ``state`` up to that count).

    After each epoch the segmentation network is scored on the clean labels of
    ``eval_set``. With ``out_dir`` the run writes metrics.csv, steps.jsonl,
    weight_stats.csv (when the train set carries corrupted samples) and the
    ``checkpoints/best`` and ``checkpoints/last`` checkpoints.
    """
    if train_set.class_names != eval_set.class_names:
        raise ValueError("train and eval sets have different class names")
    out = None if out_dir is None else Path(out_dir)
    if state is None:
        state = init_state(cfg, train_set.n_classes, profile)
    writer = _RunWriter(out, train_set.class_names)
    track = train_set.is_corrupted
    corrupted_ids = {s.id for s in train_set if s.corrupted}

    records: list[StepRecord] = []
    reports: list[DiceReport] = []
    stats: list[WeightStats] = []
    stopped_early = False

    while state.epoch < cfg.epochs:
        epoch_records = []
        for batch in batch_iterator(train_set, min(cfg.batch_size, len(train_set)), cfg.seed, state.epoch):
            epoch_records.append(train_step(state, batch))
        writer.steps(epoch_records)
        records += epoch_records

        report = evaluate_model(state.segnet, eval_set, cfg.eval_batch_size)
        reports.append(report)
        mean_loss = float(np.mean([r.scalar_loss for r in epoch_records]))
        writer.metrics(state.epoch, report, mean_loss)
        if track:
            epoch_stats = track_group_weights(epoch_records, corrupted_ids)
            stats += epoch_stats
            writer.weight_stats(epoch_stats)
        log.info("epoch %d loss %.4f dice %.4f", state.epoch, mean_loss, report.average)

        improved = report.average > state.best_dice
        if improved:
            state.best_dice, state.best_epoch = report.average, state.epoch
        state.epoch += 1
        if out is not None:
            if improved:
                save_checkpoint(state, out / "checkpoints" / "best")
                (out / "dice_report.json").write_text(
                    json.dumps({"epoch": state.best_epoch, **report.to_dict()}, indent=2) + "\n")
            save_checkpoint(state, out / "checkpoints" / "last")
        if cfg.patience is not None and state.epoch - 1 - state.best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", state.epoch - 1, state.best_epoch)
            stopped_early = True
            break

    return state, RunArtifacts(out, records, reports, stats, stopped_early)


def read_steps(path: str | Path) -> list[StepRecord]:
    with open(path) as f:
        return [StepRecord(**json.loads(line)) for line in f if line.strip()]
