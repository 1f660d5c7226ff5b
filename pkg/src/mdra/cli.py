"""Command-line harness: ``mdra gen | train | eval | sweep | check``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .bench import METHODS, Evaluator, ResultRow
from .config import ExperimentConfig
from .io import ConfigMismatchError, read_checkpoint, read_dataset, write_checkpoint, write_dataset
from .tasks import Task, make_task
from .training import EpochMetrics, Trainer, restore_trainer, trainer_state

SPLITS = ("train", "val", "test")
METRIC_FIELDS = ("epoch", "train_rate", "val_rate", "assoc_rate", "critic_loss")
RESULT_FIELDS = ("method", "p_max_dbm", "mean_rate", "std_err", "wall_ms", "feasibility", "axis", "value")


def load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    if path is None:
        raise SystemExit("--config is required")
    cfg = ExperimentConfig.load(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def task_for(cfg: ExperimentConfig) -> Task:
    return make_task(cfg.scenario, cfg.system, cfg.model)


def split_seed(seed: int, split: str) -> list[int]:
    return [seed, SPLITS.index(split)]


def generate(cfg: ExperimentConfig, split: str) -> Any:
    n = getattr(cfg.data, split)
    return task_for(cfg).sample(np.random.default_rng(split_seed(cfg.seed, split)), n)


def cmd_gen(cfg: ExperimentConfig, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in SPLITS:
        p = out / f"{split}.mdra"
        write_dataset(p, generate(cfg, split), cfg.seed)
        paths.append(p)
    return paths


def load_split(cfg: ExperimentConfig, data_dir: Path | None, split: str) -> Any:
    """Dataset from ``data_dir`` when present, else regenerated from the seed."""
    if data_dir is not None:
        scenario, inst, _ = read_dataset(data_dir / f"{split}.mdra")
        if scenario != cfg.scenario:
            raise ConfigMismatchError(f"dataset is {scenario}, config is {cfg.scenario}")
        expected = generate_shape(cfg)
        if inst.h.shape[1:] != expected:
            raise ConfigMismatchError(f"dataset dims {inst.h.shape[1:]} do not match config {expected}")
        return inst
    return generate(cfg, split)


def generate_shape(cfg: ExperimentConfig) -> tuple[int, ...]:
    s = cfg.system
    return (s.K, s.L, s.M) if cfg.scenario == "cf" else (s.K, s.N)


def save_trainer(path: Path, cfg: ExperimentConfig, trainer: Trainer) -> None:
    arrays, meta = trainer_state(trainer)
    write_checkpoint(path, cfg.to_dict(), cfg.system_hash(), arrays, meta)


def load_trainer(path: Path, cfg: ExperimentConfig, train_set: Any, val_set: Any) -> Trainer:
    _, _, arrays, meta = read_checkpoint(path, expected_hash=cfg.system_hash())
    trainer = Trainer(task_for(cfg), cfg.train, train_set, val_set, channel_scale=meta["channel_scale"])
    return restore_trainer(trainer, arrays, meta)


def load_models(path: Path, cfg: ExperimentConfig):
    """``(policy, beamformer)`` in inference mode from a checkpoint."""
    _, _, arrays, meta = read_checkpoint(path, expected_hash=cfg.system_hash())
    task = task_for(cfg)
    policy, beamformer, critic = task.build(meta["channel_scale"])
    for name, module in (("policy", policy), ("beamformer", beamformer), ("critic", critic)):
        prefix = f"{name}/"
        module.load_state_dict({k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)})
        module.eval()
    return policy, beamformer


def write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})


def plot_lines(path: Path, series: dict[str, tuple[list[float], list[float]]], xlabel: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_train(
    cfg: ExperimentConfig, out: Path, data_dir: Path | None = None, resume: Path | None = None, epochs: int | None = None
) -> Trainer:
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_split(cfg, data_dir, "train")
    val_set = load_split(cfg, data_dir, "val")
    if resume is not None:
        trainer = load_trainer(resume, cfg, train_set, val_set)
    else:
        trainer = Trainer(task_for(cfg), cfg.train, train_set, val_set)
    ckpt = out / "model.ckpt"

    def on_epoch(m: EpochMetrics) -> None:
        print(
            f"epoch {m.epoch:4d}  train {m.train_rate:8.4f}  val {m.val_rate:8.4f}  "
            f"assoc {m.assoc_rate:6.3f}  critic {m.critic_loss:9.4f}  ({m.seconds:.1f}s)",
            flush=True,
        )
        save_trainer(ckpt, cfg, trainer)

    trainer.fit(epochs, on_epoch)
    save_trainer(ckpt, cfg, trainer)
    rows = [m.row() for m in trainer.history if m.epoch > 0]
    write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    x = [r["epoch"] for r in rows]
    series = {"validation rate": (x, [r["val_rate"] for r in rows])}
    plot_lines(out / "metrics.svg", series, "epoch", "sum rate (bit/s/Hz)")
    if cfg.scenario == "cf":
        plot_lines(out / "assoc.svg", {"association rate": (x, [r["assoc_rate"] for r in rows])}, "epoch", "links / bound")
    return trainer


def parse_methods(raw: str | None, scenario: str, have_model: bool) -> list[str]:
    if raw:
        methods = [m.strip() for m in raw.split(",") if m.strip()]
    else:
        methods = [m for m in METHODS[scenario] if have_model or ("learned" not in m and "cvln" not in m)]
    unknown = [m for m in methods if m not in METHODS[scenario]]
    if unknown:
        raise SystemExit(f"unknown method(s) for {scenario}: {', '.join(unknown)}")
    return methods


def cmd_eval(
    cfg: ExperimentConfig, out: Path, checkpoint: Path | None, data_dir: Path | None, methods: list[str], n: int | None = None
) -> list[ResultRow]:
    out.mkdir(parents=True, exist_ok=True)
    test = load_split(cfg, data_dir, "test")
    if n is not None:
        test = test[np.arange(min(n, len(test)))]
    policy, beamformer = load_models(checkpoint, cfg) if checkpoint else (None, None)
    ev = Evaluator(task_for(cfg), policy, beamformer, seed=cfg.seed)
    rows = []
    for m in methods:
        row = ev.row(m, test)
        print(f"{row.method:18s} rate {row.mean_rate:9.4f} +/- {row.std_err:.4f}  {row.wall_ms:9.3f} ms  feasible {row.feasibility:.3f}")
        rows.append(row)
    write_csv(out / "results.csv", RESULT_FIELDS, [r.as_dict() for r in rows])
    return rows


SWEEP_AXES = {"p_max": "p_max_dbm", "M": "M", "N": "side"}


def axis_config(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    raw = cfg.to_dict()
    if axis == "p_max":
        raw["system"]["p_max"] = 10.0 ** ((value - 30.0) / 10.0)
    elif axis == "M":
        raw["system"]["M"] = int(value)
    elif axis == "N":
        side = int(round(math.sqrt(value)))
        if side * side != int(value):
            raise SystemExit(f"N={value} is not a square grid size")
        raw["system"]["side"] = side
    else:
        raise SystemExit(f"unknown sweep axis {axis!r}")
    return ExperimentConfig.from_dict(raw)


def cmd_sweep(
    cfg: ExperimentConfig,
    out: Path,
    axis: str,
    values: list[float],
    checkpoints: list[Path] | None,
    methods: list[str],
    n: int | None = None,
) -> list[ResultRow]:
    """One result row per (method, axis value); each axis point uses its own checkpoint."""
    out.mkdir(parents=True, exist_ok=True)
    if checkpoints and len(checkpoints) != len(values):
        raise SystemExit("need one checkpoint per axis value")
    needs_model = any(m == "learned" or "cvln" in m for m in methods)
    if needs_model and not checkpoints:
        raise SystemExit("learned methods need --checkpoints")
    rows = []
    for i, v in enumerate(values):
        point = axis_config(cfg, axis, v)
        test = generate(point, "test")
        if n is not None:
            test = test[np.arange(min(n, len(test)))]
        models = load_models(checkpoints[i], point) if checkpoints else (None, None)
        ev = Evaluator(task_for(point), *models, seed=point.seed)
        for m in methods:
            rows.append(ev.row(m, test, axis, v))
    write_csv(out / "results.csv", RESULT_FIELDS, [r.as_dict() for r in rows])
    series = {m: (list(values), [r.mean_rate for r in rows if r.method == m]) for m in methods}
    plot_lines(out / f"sweep_{axis}.svg", series, axis, "sum rate (bit/s/Hz)")
    return rows


def cmd_check(cfg: ExperimentConfig, checkpoint: Path | None, data_dir: Path | None, n: int = 1000) -> bool:
    """Audit the stored datasets and checkpoint hash, then decoder feasibility on fresh samples."""
    import tempfile

    ok = True

    def report(name: str, passed: bool, detail: str = "") -> None:
        nonlocal ok
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}{': ' + detail if detail else ''}")

    task = task_for(cfg)
    sample = task.sample(np.random.default_rng(split_seed(cfg.seed, "test")), min(n, 64))
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "probe.mdra"
        write_dataset(p, sample, cfg.seed)
        _, back, _ = read_dataset(p)
        report("dataset round-trip", back.h.tobytes() == sample.h.tobytes())
    if data_dir is not None:
        for split in SPLITS:
            try:
                load_split(cfg, data_dir, split)
                report(f"dataset {split}", True)
            except Exception as exc:  # noqa: BLE001
                report(f"dataset {split}", False, str(exc))
    if checkpoint is not None:
        try:
            policy, _ = load_models(checkpoint, cfg)
            report("checkpoint hash", True)
        except ConfigMismatchError as exc:
            report("checkpoint hash", False, str(exc))
            return False
    else:
        torch.manual_seed(cfg.seed)
        policy, _, _ = task.build(1.0)
        policy.channel_scale.fill_(task.channel_scale(sample))
        policy.eval()
    inst = task.sample(np.random.default_rng([cfg.seed, 99]), n)
    with torch.no_grad():
        trace = task.decode(policy, inst, "sample", torch.Generator().manual_seed(cfg.seed), on_dead_end="flag")
    bad = int((~task.feasible(inst, trace.bits) & ~trace.dead_end).sum())
    report(f"feasibility of {n} sampled decodes", bad == 0, f"{bad} violations, {int(trace.dead_end.sum())} dead ends")
    return ok


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdra", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", type=Path, default=Path("out"))

    sp = sub.add_parser("gen", help="write train/val/test datasets")
    common(sp)
    sp = sub.add_parser("train", help="train the networks")
    common(sp)
    sp.add_argument("--data", type=Path, default=None, help="directory with *.mdra files")
    sp.add_argument("--resume", type=Path, default=None)
    sp.add_argument("--epochs", type=int, default=None, help="total epochs (default from config)")
    sp = sub.add_parser("eval", help="compare methods on the test split")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, default=None)
    sp.add_argument("--data", type=Path, default=None)
    sp.add_argument("--methods", default=None, help="comma-separated method names")
    sp.add_argument("--limit", type=int, default=None, help="evaluate only the first N test samples")
    sp = sub.add_parser("sweep", help="evaluate methods along a parameter axis")
    common(sp)
    sp.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    sp.add_argument("--values", required=True, help="comma-separated axis values (P_max in dBm)")
    sp.add_argument("--checkpoints", default=None, help="comma-separated, one per axis value")
    sp.add_argument("--methods", default=None)
    sp.add_argument("--limit", type=int, default=None)
    sp = sub.add_parser("check", help="audit datasets, checkpoint and decoder feasibility")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, default=None)
    sp.add_argument("--data", type=Path, default=None)
    sp.add_argument("--samples", type=int, default=1000)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.seed)
    if args.command == "gen":
        for path in cmd_gen(cfg, args.out):
            print(path)
    elif args.command == "train":
        cmd_train(cfg, args.out, args.data, args.resume, args.epochs)
    elif args.command == "eval":
        methods = parse_methods(args.methods, cfg.scenario, args.checkpoint is not None)
        cmd_eval(cfg, args.out, args.checkpoint, args.data, methods, args.limit)
    elif args.command == "sweep":
        ckpts = [Path(c) for c in args.checkpoints.split(",")] if args.checkpoints else None
        methods = parse_methods(args.methods, cfg.scenario, ckpts is not None)
        values = [float(v) for v in args.values.split(",")]
        cmd_sweep(cfg, args.out, args.axis, values, ckpts, methods, args.limit)
    elif args.command == "check":
        return 0 if cmd_check(cfg, args.checkpoint, args.data, args.samples) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
