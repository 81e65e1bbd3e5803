"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

# |analytic - numeric| is divided by max(|analytic|, |numeric|, ABS_FLOOR); the
# floor keeps round-off on vanishing gradients from reading as relative error.
# Conv biases feeding train-mode batch norm have an exactly zero gradient, and
# central differences through a deep graph return ~1e-9 of noise for them.
ABS_FLOOR = 1e-5


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(
    fn: Callable[[], float],
    tensor: Tensor,
    indices=None,
    h: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    Returns (flat indices, derivative estimates). ``tensor.data`` is perturbed
    in place and restored.
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.empty(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        out[n] = (up - down) / (2 * h)
    return np.asarray(indices), out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    rng: np.random.Generator | None = None,
    max_entries: int | None = None,
    h: float = 1e-6,
) -> list[GradcheckResult]:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph on every call. With ``max_entries``,
    each tensor is checked on a random subset of that many entries.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    def value() -> float:
        return float(loss_fn().data)

    results = []
    for name, p in params.items():
        idx = None
        if max_entries is not None and p.size > max_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(p.size, size=max_entries, replace=False))
        idx, num = numeric_grad(value, p, idx, h)
        ana = analytic[name].reshape(-1)[idx]
        err = relative_error(ana, num)
        results.append(GradcheckResult(name, float(err.max()) if err.size else 0.0, len(idx)))
    return results
