"""Full model: backbone, factorized query block, memory projections, learner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .. import numcore as nc
from ..ctxlearner import LearnerParams, init_learner, predict_params
from ..embednet import (
    BackboneParams,
    FactorizedConvSpec,
    embed_query,
    embed_raw,
    final_spatial,
    init_backbone,
    init_factorized,
)
from ..episodes import Episode
from ..memory import Memory, build_memory, contextual_embed_support, project_key
from ..numcore import RunningStats, Tensor


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    filters: int = 64
    key_dim: int = 512
    hidden: int = 512
    width: int | None = None  # D_w; defaults to `filters`
    capacity: int | None = None  # memory slots; None -> support size N

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        for name in ("filters", "key_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.width is not None and self.width < 1:
            raise ValueError(f"model.width must be >= 1, got {self.width}")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError(f"model.capacity must be >= 1, got {self.capacity}")
        final_spatial(self.input_shape[1:])

    @property
    def predicted_width(self) -> int:
        return self.width or self.filters

    @property
    def feature_dim(self) -> int:
        h, w = final_spatial(self.input_shape[1:])
        return self.filters * h * w


@dataclass
class ModelParams:
    config: ModelConfig
    backbone: BackboneParams
    factorized: FactorizedConvSpec
    t_z: Tensor  # [D_m, D_z]
    t_c: Tensor  # [D_z, D_m]
    learner: LearnerParams
    _named: dict = field(default=None, init=False, repr=False)

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by stable name (order is fixed)."""
        if self._named is None:
            named = {}
            for i, blk in enumerate(self.backbone.blocks):
                for attr in ("weight", "bias", "gamma", "beta"):
                    named[f"backbone.{i}.{attr}"] = getattr(blk, attr)
            for attr in ("m_in", "m_out", "bias", "gamma", "beta"):
                named[f"factorized.{attr}"] = getattr(self.factorized, attr)
            named["memory.t_z"] = self.t_z
            named["memory.t_c"] = self.t_c
            for direction in ("forward", "backward"):
                w = getattr(self.learner, direction)
                for attr in ("w_x", "w_h", "b"):
                    named[f"learner.{direction}.{attr}"] = getattr(w, attr)
            named["learner.t_p"] = self.learner.t_p
            self._named = named
        return self._named

    def buffers(self) -> dict[str, RunningStats]:
        named = {f"backbone.{i}.stats": blk.stats for i, blk in enumerate(self.backbone.blocks)}
        named["factorized.stats"] = self.factorized.stats
        return named

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def count(self) -> int:
        return sum(p.size for p in self.parameters().values())


def init_model(config: ModelConfig, rng: np.random.Generator, dtype=None) -> ModelParams:
    """Random initialization; ``dtype`` overrides the engine default precision."""
    with nc.default_dtype(dtype or nc.get_default_dtype()):
        backbone = init_backbone(config.input_shape, config.filters, rng)
        dz, dm = config.feature_dim, config.key_dim
        factorized = init_factorized(config.filters, config.predicted_width, rng)
        t_z = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dz), size=(dm, dz)), requires_grad=True, name="memory.t_z")
        t_c = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dm), size=(dz, dm)), requires_grad=True, name="memory.t_c")
        learner = init_learner(dm, config.hidden, config.predicted_width, rng)
    return ModelParams(config, backbone, factorized, t_z, t_c, learner)


class EpisodeOutput(NamedTuple):
    logits: Tensor  # [queries, support]
    support_embeddings: Tensor  # g, [N, D_z]
    query_embeddings: Tensor  # f, [Q, D_z]
    memory: Memory
    predicted: Tensor  # W, [D_w]


def forward_episode(params: ModelParams, episode: Episode, training: bool) -> EpisodeOutput:
    """Memory from the support set, contextual support embeddings, W from the
    learner, query embeddings under W, and query-by-support dot products."""
    images = nc.as_tensor(episode.support_images)
    z = embed_raw(images, params.backbone, training)
    zk = project_key(z, params.t_z)
    capacity = params.config.capacity or len(episode.support_labels)
    mem = build_memory(zk, episode.support_labels.tolist(), capacity, episode.write_order)
    g = contextual_embed_support(z, mem, params.t_z, params.t_c, zk=zk)
    W = predict_params(mem, params.learner)
    f = embed_query(nc.as_tensor(episode.query_images), params.backbone, params.factorized, W, training)
    logits = nc.matmul(f, nc.transpose(g))
    return EpisodeOutput(logits, g, f, mem, W)


def episode_logits(params: ModelParams, episode: Episode, training: bool = True) -> Tensor:
    return forward_episode(params, episode, training).logits
