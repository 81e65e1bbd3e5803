"""Four-block convolutional backbone and its parameter-predicted query variant.

Support images go through ``embed_raw``; query images share blocks 1-3 and
replace block 4's convolution with ``m_out . diag(W) . m_in`` where ``W`` is
supplied per episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import RunningStats, ShapeError, Tensor

N_BLOCKS = 4


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats


@dataclass
class BackboneParams:
    blocks: list[ConvBlock]
    input_shape: tuple[int, int, int]

    @property
    def filters(self) -> int:
        return self.blocks[-1].weight.shape[0]

    @property
    def final_spatial(self) -> tuple[int, int]:
        return final_spatial(self.input_shape[1:])

    @property
    def feature_dim(self) -> int:
        h, w = self.final_spatial
        return self.filters * h * w


@dataclass
class FactorizedConvSpec:
    m_in: Tensor  # [D_w, F, 1, 1]
    m_out: Tensor  # [F, D_w, 1, 1]
    bias: Tensor  # [F]
    gamma: Tensor
    beta: Tensor
    stats: RunningStats

    @property
    def width(self) -> int:
        return self.m_in.shape[0]


def final_spatial(hw: tuple[int, int], blocks: int = N_BLOCKS) -> tuple[int, int]:
    h, w = hw
    for _ in range(blocks):
        if h < 2 or w < 2:
            raise ShapeError(f"input {hw} is too small for {blocks} pooling stages")
        h, w = h // 2, w // 2
    return h, w


def _param(array, name: str) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


def init_backbone(input_shape: tuple[int, int, int], filters: int, rng: np.random.Generator) -> BackboneParams:
    final_spatial(input_shape[1:])
    blocks = []
    cin = input_shape[0]
    for i in range(N_BLOCKS):
        std = np.sqrt(2.0 / (cin * 9))
        blocks.append(
            ConvBlock(
                weight=_param(rng.normal(0.0, std, size=(filters, cin, 3, 3)), f"block{i}.weight"),
                bias=_param(np.zeros(filters), f"block{i}.bias"),
                gamma=_param(np.ones(filters), f"block{i}.gamma"),
                beta=_param(np.zeros(filters), f"block{i}.beta"),
                stats=RunningStats(filters),
            )
        )
        cin = filters
    return BackboneParams(blocks, tuple(input_shape))


def init_factorized(filters: int, width: int, rng: np.random.Generator) -> FactorizedConvSpec:
    return FactorizedConvSpec(
        m_in=_param(rng.normal(0.0, np.sqrt(2.0 / filters), size=(width, filters, 1, 1)), "fact.m_in"),
        m_out=_param(rng.normal(0.0, np.sqrt(1.0 / width), size=(filters, width, 1, 1)), "fact.m_out"),
        bias=_param(np.zeros(filters), "fact.bias"),
        gamma=_param(np.ones(filters), "fact.gamma"),
        beta=_param(np.zeros(filters), "fact.beta"),
        stats=RunningStats(filters),
    )


def _check_images(images: Tensor, params: BackboneParams) -> tuple[Tensor, bool]:
    images = nc.as_tensor(images)
    single = images.ndim == 3
    if single:
        images = nc.reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1:] != params.input_shape:
        raise ShapeError(f"expected images of shape {params.input_shape}, got {images.shape}")
    return images, single


def _finish_block(h: Tensor, gamma, beta, stats, training: bool) -> Tensor:
    return nc.maxpool2(nc.relu(nc.batch_norm(h, gamma, beta, stats, training)))


def run_blocks(images: Tensor, params: BackboneParams, training: bool, upto: int = N_BLOCKS) -> Tensor:
    h = images
    for blk in params.blocks[:upto]:
        h = _finish_block(nc.conv2d(h, blk.weight, blk.bias), blk.gamma, blk.beta, blk.stats, training)
    return h


def embed_raw(images, params: BackboneParams, training: bool) -> Tensor:
    """Raw features z for a batch [B, C, H, W] (or one image [C, H, W]).

    All images in the call are normalized as one batch in train mode.
    Returns [B, D_z] (or [D_z]).
    """
    images, single = _check_images(images, params)
    h = run_blocks(images, params, training)
    z = nc.reshape(h, (h.shape[0], -1))
    return nc.reshape(z, (z.shape[1],)) if single else z


def factorized_conv(h: Tensor, fspec: FactorizedConvSpec, W) -> Tensor:
    """m_out(diag(W) m_in(h)) + bias, with 1x1 convolutions on each side."""
    W = nc.as_tensor(W)
    if W.shape != (fspec.width,):
        raise ShapeError(f"predicted parameter vector must have {fspec.width} entries, got shape {W.shape}")
    u = nc.conv2d(h, fspec.m_in, None)
    v = u * nc.reshape(W, (1, fspec.width, 1, 1))
    return nc.conv2d(v, fspec.m_out, fspec.bias)


def embed_query(images, params: BackboneParams, fspec: FactorizedConvSpec, W, training: bool) -> Tensor:
    """Query embeddings f(x; W) for a batch; blocks 1-3 are shared with ``embed_raw``."""
    images, single = _check_images(images, params)
    h = run_blocks(images, params, training, upto=N_BLOCKS - 1)
    h = _finish_block(factorized_conv(h, fspec, W), fspec.gamma, fspec.beta, fspec.stats, training)
    f = nc.reshape(h, (h.shape[0], -1))
    return nc.reshape(f, (f.shape[1],)) if single else f
