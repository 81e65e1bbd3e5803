"""Convolution, pooling, batch normalization and the LSTM cell."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .errors import ShapeError, UninitializedStatsError
from .tensor import Tensor, as_tensor, record


def _batched(x: Tensor, rank: int, what: str) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected a {rank - 1}-d or {rank}-d input, got shape {x.shape}")
    return x, False


def conv2d(x, weight, bias=None, padding: int | None = None) -> Tensor:
    """Direct 2-d cross-correlation, stride 1.

    Inputs:
    - x: [B, Cin, H, W] or [Cin, H, W]
    - weight: [Cout, Cin, kh, kw]
    - bias: [Cout] or None
    - padding: zero padding on each side; defaults to (kh - 1) // 2 ("same" for odd kernels)

    Returns [B, Cout, H', W'] (or [Cout, H', W'] for an unbatched input).
    """
    x, w = as_tensor(x), as_tensor(weight)
    x, squeeze = _batched(x, 4, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout, Cin, kh, kw], got {w.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has Cin={cin} but weight expects Cin={wcin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    p = (kh - 1) // 2 if padding is None else padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # [B, Cin, Ho, Wo, kh, kw] -> [B*Ho*Wo, Cin*kh*kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    y = record(out, parents, backward if bias is not None else (lambda g: backward(g)[:2]))
    return ops.reshape(y, y.shape[1:]) if squeeze else y


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2.

    Odd spatial extents are floor-pooled (the last row/column is dropped);
    extents below 2 are rejected. Backward routes each window's gradient to
    the first maximal element in row-major order.
    """
    x = as_tensor(x)
    x, squeeze = _batched(x, 4, "maxpool2")
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"maxpool2: spatial extent {H}x{W} is too small to pool")
    H2, W2 = H // 2, W // 2
    win = x.data[:, :, :2 * H2, :2 * W2].reshape(B, C, H2, 2, W2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((B, C, H2, W2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * H2, :2 * W2] = gwin.reshape(B, C, 2 * H2, 2 * W2)
        return (gx,)

    y = record(out, (x,), backward)
    return ops.reshape(y, y.shape[1:]) if squeeze else y


@dataclass
class RunningStats:
    """Exponential moving averages of per-channel batch mean and variance."""

    channels: int
    momentum: float = 0.1
    mean: np.ndarray | None = field(default=None)
    var: np.ndarray | None = field(default=None)

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if self.mean is None:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
        else:
            m = self.momentum
            self.mean = (1 - m) * self.mean + m * batch_mean
            self.var = (1 - m) * self.var + m * batch_var


BN_EPS = 1e-5


def batch_norm(x, gamma, beta, stats: RunningStats, training: bool, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over [B, C, H, W] or [B, C] inputs.

    Train mode normalizes with the biased batch variance but folds the
    unbiased estimate (n / (n - 1)) into ``stats``: at the last block of a
    5-way 1-shot support set n is 5 and the biased value would undershoot
    the population variance by 20%. Eval mode uses ``stats`` and raises UninitializedStatsError if
    no training pass has populated them.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected [B, C] or [B, C, H, W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({C},), got {gamma.shape}/{beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    count = x.size // C

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.update(mu, var * (count / (count - 1)) if count > 1 else var)
    else:
        if not stats.initialized:
            raise UninitializedStatsError("batch_norm in eval mode with uninitialized running stats")
        mu, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)

    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (invstd.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward)


def lstm_cell(x, h, c, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """One step of a standard LSTM.

    ``w_x`` is [4D, Din], ``w_h`` is [4D, D], ``b`` is [4D]; gate blocks are
    ordered input, forget, output, candidate. ``x``/``h``/``c`` are vectors or
    row-batched matrices.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    D = w_h.shape[1]
    if w_h.shape != (4 * D, D) or b.shape != (4 * D,) or w_x.ndim != 2 or w_x.shape[0] != 4 * D:
        raise ShapeError(
            f"lstm_cell: inconsistent weights w_x={w_x.shape} w_h={w_h.shape} b={b.shape}"
        )
    if x.shape[-1] != w_x.shape[1]:
        raise ShapeError(f"lstm_cell: input size {x.shape[-1]} != weight input size {w_x.shape[1]}")
    if h.shape[-1] != D or c.shape[-1] != D:
        raise ShapeError(f"lstm_cell: state sizes {h.shape}/{c.shape} do not match hidden size {D}")

    gates = ops.matmul(x, w_x.T) + ops.matmul(h, w_h.T) + b
    i = ops.sigmoid(gates[..., 0:D])
    f = ops.sigmoid(gates[..., D:2 * D])
    o = ops.sigmoid(gates[..., 2 * D:3 * D])
    cand = ops.tanh(gates[..., 3 * D:4 * D])
    c_next = f * c + i * cand
    h_next = o * ops.tanh(c_next)
    return h_next, c_next
