"""Bidirectional LSTM over memory keys that predicts the query-network vector W."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .memory import Memory
from .numcore import ShapeError, Tensor


@dataclass
class LSTMWeights:
    w_x: Tensor  # [4 D_r, D_m]
    w_h: Tensor  # [4 D_r, D_r]
    b: Tensor  # [4 D_r]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


@dataclass
class LearnerParams:
    forward: LSTMWeights
    backward: LSTMWeights
    t_p: Tensor  # [D_w, D_r]

    def __post_init__(self):
        D = self.forward.hidden
        if self.backward.hidden != D:
            raise ShapeError(f"forward/backward hidden sizes differ: {D} vs {self.backward.hidden}")
        if self.t_p.ndim != 2 or self.t_p.shape[1] != D:
            raise ShapeError(f"T_p must be [D_w, {D}], got {self.t_p.shape}")

    @property
    def hidden(self) -> int:
        return self.forward.hidden

    @property
    def width(self) -> int:
        return self.t_p.shape[0]


def _init_lstm(input_dim: int, hidden: int, rng: np.random.Generator, prefix: str) -> LSTMWeights:
    bound = 1.0 / np.sqrt(hidden)
    b = rng.uniform(-bound, bound, size=4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return LSTMWeights(
        w_x=Tensor(rng.uniform(-bound, bound, size=(4 * hidden, input_dim)), requires_grad=True, name=f"{prefix}.w_x"),
        w_h=Tensor(rng.uniform(-bound, bound, size=(4 * hidden, hidden)), requires_grad=True, name=f"{prefix}.w_h"),
        b=Tensor(b, requires_grad=True, name=f"{prefix}.b"),
    )


def init_learner(key_dim: int, hidden: int, width: int, rng: np.random.Generator) -> LearnerParams:
    """Forget-gate bias 1, everything else (T_p included) U(-1/sqrt(D_r), 1/sqrt(D_r)).

    T_p must not start at zero: W = 0 makes the factorized block constant,
    batch norm maps it to beta = 0 and the following ReLU passes no gradient.
    """
    bound = 1.0 / np.sqrt(hidden)
    fwd = _init_lstm(key_dim, hidden, rng, "learner.fwd")
    bwd = _init_lstm(key_dim, hidden, rng, "learner.bwd")
    t_p = rng.uniform(-bound, bound, size=(width, hidden))
    return LearnerParams(fwd, bwd, Tensor(t_p, requires_grad=True, name="learner.t_p"))


def run_lstm(sequence: list[Tensor], weights: LSTMWeights) -> Tensor:
    """Final hidden state after feeding ``sequence`` from zero initial state."""
    D = weights.hidden
    dtype = weights.w_h.dtype
    h = nc.Tensor(np.zeros(D, dtype=dtype), dtype=dtype)
    c = nc.Tensor(np.zeros(D, dtype=dtype), dtype=dtype)
    for x in sequence:
        h, c = nc.lstm_cell(x, h, c, weights.w_x, weights.w_h, weights.b)
    return h


def encode_memory(mem: Memory, lp: LearnerParams) -> Tensor:
    """Sum of the final forward and backward hidden states over the keys."""
    if not mem.slots:
        raise ValueError("cannot encode an empty memory")
    keys = [s.key for s in mem.slots]
    return run_lstm(keys, lp.forward) + run_lstm(keys[::-1], lp.backward)


def predict_params(mem: Memory, lp: LearnerParams) -> Tensor:
    """W = T_p h for the memory's bidirectional encoding h."""
    return nc.matmul(lp.t_p, encode_memory(mem, lp))
