"""Gradient steps over episode batches and the episodic evaluation protocol."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import numcore as nc
from ..episodes import Dataset, Episode, SamplingStrategy, sample_by_strategy, sample_episode
from ..rng import stream
from .loss import episode_loss, predict_labels
from .model import ModelParams, forward_episode
from .optim import Adam

EVAL_EPISODES = 500
EVAL_QUERIES = 15


class NumericalAbort(RuntimeError):
    """Loss or gradients became NaN/Inf."""


def batch_loss(params: ModelParams, episodes: Sequence[Episode], average_matches: bool = False) -> nc.Tensor:
    total = None
    for ep in episodes:
        out = forward_episode(params, ep, training=True)
        term = episode_loss(out.logits, ep.support_labels, ep.query_labels, average_matches)
        total = term if total is None else total + term
    return total * (1.0 / len(episodes))


def train_step(params: ModelParams, opt: Adam, episodes: Sequence[Episode], average_matches: bool = False) -> float:
    """One Adam update on the mean episode loss; returns that loss.

    ``params`` and ``opt`` are updated in place.
    """
    if not episodes:
        raise ValueError("train_step needs at least one episode")
    params.zero_grad()
    with nc.Tape() as tape:
        loss = batch_loss(params, episodes, average_matches)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalAbort(f"non-finite loss {value} at step {opt.step}")
    tape.backward(loss)
    for name, p in params.parameters().items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalAbort(f"non-finite gradient for {name} at step {opt.step}")
    opt.update(params.parameters())
    return value


def warm_up_batchnorm(params: ModelParams, ds: Dataset, strategy: SamplingStrategy, episodes: int, seed: int) -> None:
    """Populate running statistics with train-mode forward passes (no update)."""
    for i in range(episodes):
        forward_episode(params, sample_by_strategy(ds, strategy, stream(seed, "val", i)), training=True)


@dataclass
class EvalReport:
    ways: int
    shots: int
    episodes: int
    mean_accuracy: float
    ci95: float
    wall_time: float
    accuracies: list[float] = field(default_factory=list, repr=False)

    def percent(self) -> str:
        return f"{100 * self.mean_accuracy:.2f} ± {100 * self.ci95:.2f}"


def confidence95(accuracies: Sequence[float]) -> float:
    n = len(accuracies)
    if n < 2:
        return 0.0
    return 1.96 * float(np.std(accuracies, ddof=1)) / math.sqrt(n)


def episode_accuracy(params: ModelParams, ep: Episode, per_class: bool = False) -> float:
    logits = forward_episode(params, ep, training=False).logits
    pred = predict_labels(logits, ep.support_labels, per_class)
    return float(np.mean(pred == ep.query_labels))


def evaluate(
    params: ModelParams,
    ds: Dataset,
    ways: int,
    shots: int,
    n_episodes: int = EVAL_EPISODES,
    queries: int = EVAL_QUERIES,
    seed: int = 0,
    threads: int = 1,
    per_class: bool = False,
    stream_name: str = "eval",
) -> EvalReport:
    """Mean per-episode query accuracy with a 95% confidence interval.

    Episode i is drawn from the (seed, stream_name, i) sub-stream, so the
    report does not depend on ``threads``.
    """
    start = time.perf_counter()

    def one(i: int) -> float:
        ep = sample_episode(ds, ways, shots, queries, stream(seed, stream_name, i))
        return episode_accuracy(params, ep, per_class)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(one, range(n_episodes)))
    else:
        accs = [one(i) for i in range(n_episodes)]
    return EvalReport(
        ways=ways,
        shots=shots,
        episodes=n_episodes,
        mean_accuracy=float(np.mean(accs)),
        ci95=confidence95(accs),
        wall_time=time.perf_counter() - start,
        accuracies=accs,
    )
