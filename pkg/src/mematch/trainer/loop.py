"""Episodic training loop with periodic checkpoints, CSV metrics and validation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..episodes import Dataset, SamplingStrategy, sample_by_strategy
from ..rng import stream
from .checkpoint import save_checkpoint
from .engine import evaluate, train_step
from .model import ModelParams
from .optim import Adam

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "lr", "val_acc"]


@dataclass
class TrainSettings:
    steps: int
    strategy: SamplingStrategy
    seed: int
    batch: int = 16  # episodes per gradient step
    checkpoint_every: int = 1000
    val_every: int = 1000
    val_episodes: int = 100
    val_ways: int = 5
    val_shots: int = 1
    average_matches: bool = False


def step_episodes(ds: Dataset, settings: TrainSettings, step: int):
    return [sample_by_strategy(ds, settings.strategy, stream(settings.seed, "episodes", step, b)) for b in range(settings.batch)]


def _open_metrics(path: Path):
    fresh = not path.exists() or path.stat().st_size == 0
    fh = path.open("a", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    if fresh:
        writer.writerow(METRICS_HEADER)
    return fh, writer


def train(
    params: ModelParams,
    opt: Adam,
    ds: Dataset,
    settings: TrainSettings,
    checkpoint_path=None,
    metrics_path=None,
    val_ds: Dataset | None = None,
    extra_meta: dict | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run from ``opt.step`` up to ``settings.steps`` and return the losses.

    Episodes for step s are drawn from the (seed, "episodes", s, b) streams,
    so a run resumed from a checkpoint replays the uninterrupted trajectory.
    When ``val_ds`` is given, the checkpoint with the best validation
    accuracy is also kept at ``<checkpoint>.best``.
    """
    meta = dict(extra_meta or {})
    meta["rng"] = {"seed": settings.seed, "stream": "episodes", "next_index": None}
    ckpt = Path(checkpoint_path) if checkpoint_path else None
    fh = writer = None
    if metrics_path:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh, writer = _open_metrics(Path(metrics_path))
    best = meta.get("best_val_acc", -1.0)
    losses = []

    def snapshot(path):
        meta["rng"]["next_index"] = opt.step
        meta["best_val_acc"] = best
        save_checkpoint(params, opt, opt.step, path, meta)

    try:
        while opt.step < settings.steps:
            step = opt.step
            lr = opt.lr
            loss = train_step(params, opt, step_episodes(ds, settings, step), settings.average_matches)
            losses.append(loss)
            val_acc = ""
            done = opt.step
            if val_ds is not None and settings.val_every and done % settings.val_every == 0:
                report = evaluate(
                    params, val_ds, settings.val_ways, settings.val_shots,
                    n_episodes=settings.val_episodes, seed=settings.seed, stream_name="val",
                )
                val_acc = f"{report.mean_accuracy:.6f}"
                if report.mean_accuracy > best:
                    best = report.mean_accuracy
                    if ckpt:
                        snapshot(ckpt.with_name(ckpt.name + ".best"))
            if writer:
                writer.writerow([done, f"{loss:.6f}", f"{lr:.8g}", val_acc])
                fh.flush()
            if ckpt and settings.checkpoint_every and done % settings.checkpoint_every == 0:
                snapshot(ckpt)
            if on_step:
                on_step(done, loss)
            if done % 100 == 0:
                log.info("step %d loss %.4f lr %.2e", done, loss, lr)
        if ckpt:
            snapshot(ckpt)
    finally:
        if fh:
            fh.close()
    return losses
