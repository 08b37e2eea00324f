"""Command-line entry point: synth, corrupt, train, train-grid, eval, report.

Exit codes: 0 ok, 1 I/O failure, 2 usage/validation error, 3 state conflict
(e.g. corrupting already-corrupted data), 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import datasets as ds
from .corruption import AlreadyCorruptedError, CorruptionError, NoiseSpec, corrupt, write_manifest
from .evaluation import results_table
from .models import DivergenceError, load_profile
from .training import CheckpointError, TrainConfig, load_checkpoint, read_steps, train

log = logging.getLogger("palseg")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_CONFLICT, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class ConflictError(Exception):
    pass


# --------------------------------------------------------------------------- run config


@dataclass
class RunConfig:
    train_data: str
    eval_data: str
    out_dir: str
    train: dict = field(default_factory=dict)
    noise: dict | None = None
    model_profile: str | None = None

    KEYS = ("train_data", "eval_data", "out_dir", "train", "noise", "model_profile")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise UsageError("run config must be a JSON object")
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        missing = {"train_data", "eval_data", "out_dir"} - set(d)
        if missing:
            raise UsageError(f"missing run config keys: {sorted(missing)}")
        rc = cls(**d)
        rc.train_config()
        rc.noise_spec()
        return rc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig.from_dict(self.train)
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid train config: {e}") from e

    def noise_spec(self) -> NoiseSpec | None:
        if not self.noise:
            return None
        try:
            return NoiseSpec(**self.noise)
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid noise config: {e}") from e

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from e


def _require_dataset(path: str | Path) -> Path:
    p = Path(path)
    if not (p / "dataset.json").exists():
        raise UsageError(f"{p} is not a dataset directory (no dataset.json)")
    return p


def _dataset_noise(path: Path) -> dict | None:
    m = path / "corruption_manifest.json"
    return json.loads(m.read_text())["noise_spec"] if m.exists() else None


def execute_run(rc: RunConfig) -> Path:
    """Train one run described by ``rc``; returns the run directory."""
    cfg = rc.train_config()
    spec = rc.noise_spec()
    train_dir, eval_dir = _require_dataset(rc.train_data), _require_dataset(rc.eval_data)
    profile = load_profile(rc.model_profile)

    train_set = ds.load_dataset(train_dir)
    eval_set = ds.load_dataset(eval_dir)
    records = None
    if spec is not None:
        if train_set.is_corrupted:
            raise ConflictError(f"{train_dir} is already corrupted; drop 'noise' from the config")
        train_set, records = corrupt(train_set, spec)
    noise_echo = spec.to_dict() if spec else _dataset_noise(train_dir)

    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = rc.to_dict() | {"train": cfg.to_dict(), "noise": noise_echo}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    if records is not None:
        write_manifest(out / "corruption_manifest.json", spec, records)
    elif (train_dir / "corruption_manifest.json").exists():
        shutil.copyfile(train_dir / "corruption_manifest.json", out / "corruption_manifest.json")
    for f in ("metrics.csv", "steps.jsonl", "weight_stats.csv"):
        (out / f).unlink(missing_ok=True)
    train(cfg, train_set, eval_set, out, profile=profile)
    return out


# --------------------------------------------------------------------------- commands


def cmd_synth(a) -> int:
    d = ds.generate_synthetic(a.count, a.size, a.classes, a.seed)
    path = ds.save_dataset(d, a.out)
    print(path)
    return EXIT_OK


def cmd_corrupt(a) -> int:
    src = _require_dataset(a.input)
    spec = NoiseSpec(a.fraction, a.radius_min, a.radius_max, a.op_policy, a.seed)
    if (src / "corruption_manifest.json").exists():
        raise ConflictError(f"{src} already carries a corruption manifest")
    d = ds.load_dataset(src)
    noisy, records = corrupt(d, spec)
    ds.save_dataset(noisy, a.out)
    path = write_manifest(Path(a.out) / "corruption_manifest.json", spec, records)
    print(path)
    return EXIT_OK


def _run_config_from_args(a) -> RunConfig:
    if a.config:
        raw = _load_json(a.config)
    else:
        if not (a.train_data and a.eval_data and a.out):
            raise UsageError("train needs --config or all of --train-data, --eval-data, --out")
        raw = {"train_data": a.train_data, "eval_data": a.eval_data, "out_dir": a.out, "train": {}}
    raw.setdefault("train", {})
    overrides = {"strategy": a.strategy, "epochs": a.epochs, "batch_size": a.batch_size,
                 "learning_rate": a.lr, "lam": a.lam, "seed": a.seed, "profile": a.profile}
    raw["train"] = raw["train"] | {k: v for k, v in overrides.items() if v is not None}
    if a.patience is not None:
        raw["train"]["patience"] = a.patience if a.patience > 0 else None
    if a.out:
        raw["out_dir"] = a.out
    return RunConfig.from_dict(raw)


def cmd_train(a) -> int:
    out = execute_run(_run_config_from_args(a))
    print(out)
    return EXIT_OK


def _grid_cells(a) -> list[tuple[str, float, int, int]]:
    strategies = [s.strip() for s in a.strategies.split(",") if s.strip()]
    fractions = [float(f) for f in a.fractions.split(",") if f.strip()]
    radii = []
    for r in a.radii.split(","):
        lo, _, hi = r.partition("-")
        radii.append((int(lo), int(hi or lo)))
    cells = []
    for frac in fractions:
        for lo, hi in (radii if frac > 0 else radii[:1]):
            for s in strategies:
                cells.append((s, frac, lo, hi))
    return cells


def cmd_train_grid(a) -> int:
    root = Path(a.out)
    configs = []
    for strategy, frac, lo, hi in _grid_cells(a):
        name = f"{strategy}_p{round(frac * 100):02d}" + (f"_r{lo}-{hi}" if frac > 0 else "")
        train_cfg = {"strategy": strategy, "seed": a.seed, "profile": a.profile}
        if a.epochs is not None:
            train_cfg["epochs"] = a.epochs
        if a.patience is not None:
            train_cfg["patience"] = a.patience if a.patience > 0 else None
        noise = {"fraction": frac, "radius_min": lo, "radius_max": hi, "seed": a.noise_seed} if frac > 0 else None
        configs.append(RunConfig.from_dict({
            "train_data": a.train_data, "eval_data": a.eval_data, "out_dir": str(root / name),
            "train": train_cfg, "noise": noise}))
    _require_dataset(a.train_data)
    _require_dataset(a.eval_data)

    root.mkdir(parents=True, exist_ok=True)
    if a.jobs <= 1:
        for rc in configs:
            print(execute_run(rc))
        return EXIT_OK

    running, status = [], EXIT_OK
    for rc in configs:
        cfg_path = Path(rc.out_dir).with_suffix(".json")
        cfg_path.write_text(json.dumps(rc.to_dict(), indent=2) + "\n")
        if len(running) >= a.jobs:
            status = max(status, running.pop(0).wait())
        running.append(subprocess.Popen([sys.executable, "-m", "palseg.cli", "train", "--config", str(cfg_path)]))
    for proc in running:
        status = max(status, proc.wait())
    return status


def cmd_eval(a) -> int:
    from .evaluation import evaluate_model

    ckpt = Path(a.checkpoint)
    data = _require_dataset(a.data)
    profile = load_profile(a.model_profile)
    state = load_checkpoint(ckpt, profile)
    report = evaluate_model(state.segnet, ds.load_dataset(data))
    text = json.dumps({"checkpoint": str(ckpt), "epoch": state.epoch, **report.to_dict()}, indent=2)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _plot_run(run: Path, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    steps = read_steps(run / "steps.jsonl") if (run / "steps.jsonl").exists() else []
    if steps:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r.step for r in steps], [r.scalar_loss for r in steps], lw=0.8)
        ax.set(xlabel="step", ylabel="re-weighted loss", title=run.name)
        written.append(out / f"{run.name}_loss.png")
        fig.tight_layout()
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)

    metrics = [r for r in _read_csv(run / "metrics.csv") if r["split"] == "eval"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([int(r["epoch"]) for r in metrics], [float(r["dice_average"]) for r in metrics])
    ax.set(xlabel="epoch", ylabel="mean class Dice (test)", title=run.name, ylim=(0, 1))
    written.append(out / f"{run.name}_dice.png")
    fig.tight_layout()
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    cfg = json.loads((run / "config.json").read_text())
    ws_path = run / "weight_stats.csv"
    if cfg["train"]["strategy"] != "baseline" and ws_path.exists():
        rows = _read_csv(ws_path)
        x = [int(r["step"]) for r in rows]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        for grp in ("clean", "noisy"):
            a1.plot(x, [float(r[f"mean_{grp}"]) for r in rows], label=grp)
            a2.plot(x, [float(r[f"var_{grp}"]) for r in rows], label=grp)
        a1.set(xlabel="step", ylabel="mean relative weight (B*w)")
        a2.set(xlabel="step", ylabel="variance of relative weight")
        a1.legend()
        written.append(out / f"{run.name}_weights.png")
        fig.tight_layout()
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    elif cfg["train"]["strategy"] != "baseline":
        log.warning("%s: no corruption manifest/weight stats, weight-dynamics plot skipped", run.name)
    return written


def cmd_report(a) -> int:
    runs = [Path(r) for r in a.runs]
    if a.root:
        runs += sorted(p for p in Path(a.root).iterdir() if (p / "metrics.csv").exists())
    table = results_table(runs)
    if not table.rows:
        log.error("no valid runs to report")
        return EXIT_IO
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "results_table.csv")
    (out / "results_table.txt").write_text(table.render())
    print(table.render(), end="")
    valid = {r.run for r in table.rows}
    for run in runs:
        if run.name in valid:
            _plot_run(run, out)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="palseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--classes", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("corrupt", help="erode/dilate a fraction of the labels")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--fraction", "--noise-fraction", type=float, required=True)
    c.add_argument("--radius-min", type=int, required=True)
    c.add_argument("--radius-max", type=int, required=True)
    c.add_argument("--op-policy", choices=["erode", "dilate", "random_either"], default="random_either")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_corrupt)

    def train_flags(t):
        t.add_argument("--strategy", choices=["baseline", "qam", "qam_ocm"])
        t.add_argument("--epochs", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--lambda", dest="lam", type=float)
        t.add_argument("--seed", type=int)
        t.add_argument("--profile", choices=["desk", "full"])
        t.add_argument("--patience", type=int, help="early-stop patience in epochs; 0 disables")

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config")
    t.add_argument("--train-data")
    t.add_argument("--eval-data")
    t.add_argument("--out")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("train-grid", help="train the strategy x noise grid")
    g.add_argument("--train-data", required=True)
    g.add_argument("--eval-data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--strategies", default="baseline,qam,qam_ocm")
    g.add_argument("--fractions", default="0,0.25,0.5,0.75")
    g.add_argument("--radii", default="5-13", help="comma-separated lo-hi ranges, e.g. 1-8,5-13")
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-seed", type=int, default=0)
    g.add_argument("--profile", choices=["desk", "full"], default="desk")
    g.add_argument("--jobs", type=int, default=1, help="parallel subprocesses")
    g.set_defaults(func=cmd_train_grid)

    e = sub.add_parser("eval", help="Dice of a checkpoint on a dataset's clean labels")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--model-profile")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="results table and plots over run dirs")
    r.add_argument("runs", nargs="*")
    r.add_argument("--root", help="directory whose subdirectories are runs")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (UsageError, CorruptionError, ds.DatasetError, ValueError) as e:
        if isinstance(e, AlreadyCorruptedError):
            log.error("%s", e)
            return EXIT_CONFLICT
        parser.print_usage(sys.stderr)
        log.error("%s", e)
        return EXIT_USAGE
    except ConflictError as e:
        log.error("%s", e)
        return EXIT_CONFLICT
    except DivergenceError as e:
        log.error("training diverged: %s", e)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
