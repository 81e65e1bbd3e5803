"""Key-value memory over a support set.

Keys are unit-norm vectors in key space; values are episode-local class
labels. The write controller merges a new support key into its nearest
slot when the labels agree and allocates a fresh slot otherwise (falling
back to a merge when the memory is full). The read controller attends over
the stored keys with a softmax of dot products.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import DegenerateInputError, ShapeError, Tensor


class WriteBranch(enum.Enum):
    ALLOCATE = "allocate"
    MERGE = "merge"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class MemorySlot:
    key: Tensor
    value: int


@dataclass(frozen=True)
class Memory:
    capacity: int
    key_dim: int
    slots: tuple[MemorySlot, ...] = field(default=())

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"memory capacity must be >= 1, got {self.capacity}")
        if len(self.slots) > self.capacity:
            raise ValueError(f"{len(self.slots)} slots exceed capacity {self.capacity}")

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def is_full(self) -> bool:
        return len(self.slots) >= self.capacity

    @property
    def values(self) -> list[int]:
        return [s.value for s in self.slots]

    def key_matrix(self) -> Tensor:
        """Stacked keys [slots, D_m] in allocation order."""
        if not self.slots:
            raise ValueError("memory is empty")
        return nc.stack([s.key for s in self.slots])


def project_key(z, t_z) -> Tensor:
    """Map raw features into key space: T_z z for a vector, Z T_z^T for rows."""
    z, t_z = nc.as_tensor(z), nc.as_tensor(t_z)
    if t_z.ndim != 2 or z.shape[-1] != t_z.shape[1]:
        raise ShapeError(f"project_key: features {z.shape} do not match T_z {t_z.shape}")
    if z.ndim == 1:
        return nc.matmul(t_z, z)
    return nc.matmul(z, nc.transpose(t_z))


def nearest_slot(mem: Memory, unit_key: np.ndarray) -> int:
    keys = np.stack([s.key.data for s in mem.slots])
    return int(np.argmax(keys @ unit_key))


def plan_write(mem: Memory, unit_key: np.ndarray, label: int) -> tuple[WriteBranch, int]:
    """Decide which write branch fires and which slot it touches."""
    if not mem.slots:
        return WriteBranch.ALLOCATE, 0
    i = nearest_slot(mem, unit_key)
    if mem.slots[i].value == label:
        return WriteBranch.MERGE, i
    if not mem.is_full:
        return WriteBranch.ALLOCATE, len(mem.slots)
    return WriteBranch.FALLBACK, i


def write_step(mem: Memory, zk, label: int) -> tuple[Memory, WriteBranch]:
    zk = nc.as_tensor(zk)
    if zk.shape != (mem.key_dim,):
        raise ShapeError(f"write: key must have shape ({mem.key_dim},), got {zk.shape}")
    unit = nc.l2_normalize(zk)
    branch, i = plan_write(mem, unit.data, int(label))
    slots = list(mem.slots)
    if branch is WriteBranch.ALLOCATE:
        slots.append(MemorySlot(unit, int(label)))
    else:
        old = slots[i]
        slots[i] = MemorySlot(nc.l2_normalize(old.key + unit), old.value)
    return Memory(mem.capacity, mem.key_dim, tuple(slots)), branch


def write(mem: Memory, zk, label: int) -> Memory:
    """Write one (key, label) pair and return the updated memory.

    The slot choice is a hard argmax; gradients reach the stored keys only
    through the normalize/add expressions.
    """
    return write_step(mem, zk, label)[0]


def build_memory(keys: Tensor, labels: Sequence[int], capacity: int, order: Sequence[int] | None = None) -> Memory:
    """Fold ``write`` over rows of ``keys`` [N, D_m] in ``order``."""
    keys = nc.as_tensor(keys)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ShapeError(f"build_memory: expected non-empty [N, D_m] keys, got {keys.shape}")
    if len(labels) != keys.shape[0]:
        raise ShapeError(f"build_memory: {keys.shape[0]} keys but {len(labels)} labels")
    mem = Memory(capacity, keys.shape[1])
    for n in range(keys.shape[0]) if order is None else order:
        mem = write(mem, keys[n], labels[n])
    return mem


def encode_support(images, labels, backbone, t_z, capacity: int | None = None, order=None, training: bool = True) -> Memory:
    """Embed the support images (as one batch) and write them into a fresh memory."""
    from .embednet import embed_raw

    z = embed_raw(images, backbone, training)
    if z.ndim == 1:
        z = nc.reshape(z, (1, -1))
    return build_memory(project_key(z, t_z), list(labels), capacity or z.shape[0], order)


def attention(mem: Memory, zk) -> Tensor:
    """Softmax of zk . key_i over occupied slots; zk may be [D_m] or [N, D_m]."""
    if not mem.slots:
        raise ValueError("cannot read from an empty memory")
    zk = nc.as_tensor(zk)
    if zk.shape[-1] != mem.key_dim:
        raise ShapeError(f"read: query dim {zk.shape[-1]} != key dim {mem.key_dim}")
    K = mem.key_matrix()
    return nc.softmax(nc.matmul(zk, nc.transpose(K)), axis=-1)


def read(mem: Memory, zk) -> Tensor:
    """Aggregated memory vector c = sum_i a_i key_i."""
    return nc.matmul(attention(mem, zk), mem.key_matrix())


def contextual_embed_support(z, mem: Memory, t_z, t_c, zk=None) -> Tensor:
    """g = T_c read(mem, T_z z) + z, for a vector or row batch.

    Pass ``zk`` to reuse an already projected key.
    """
    z, t_c = nc.as_tensor(z), nc.as_tensor(t_c)
    if zk is None:
        zk = project_key(z, t_z)
    if t_c.shape != (z.shape[-1], mem.key_dim):
        raise ShapeError(f"T_c must be ({z.shape[-1]}, {mem.key_dim}), got {t_c.shape}")
    c = read(mem, zk)
    if c.ndim == 1:
        return nc.matmul(t_c, c) + z
    return nc.matmul(c, nc.transpose(t_c)) + z


__all__ = [
    "DegenerateInputError",
    "Memory",
    "MemorySlot",
    "WriteBranch",
    "attention",
    "build_memory",
    "contextual_embed_support",
    "encode_support",
    "nearest_slot",
    "plan_write",
    "project_key",
    "read",
    "write",
    "write_step",
]
