"""C-way k-shot episode sampling, uniform and mixed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset


class SamplingError(ValueError):
    pass


@dataclass
class Episode:
    support_images: np.ndarray  # [C*k, ch, H, W], class-major
    support_labels: np.ndarray  # [C*k] episode-local labels
    query_images: np.ndarray  # [C*q, ch, H, W]
    query_labels: np.ndarray
    ways: int
    shots: int
    queries: int
    write_order: np.ndarray  # order in which support samples are written to memory
    class_names: tuple[str, ...] = ()

    @property
    def support(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.support_images, self.support_labels.tolist()))

    @property
    def query(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.query_images, self.query_labels.tolist()))


def sample_episode(ds: Dataset, ways: int, shots: int, queries: int, rng: np.random.Generator) -> Episode:
    """Draw ``ways`` classes without replacement, then ``shots + queries``
    distinct images per class; the first ``shots`` go to the support set."""
    if ways < 1 or shots < 1 or queries < 0:
        raise SamplingError(f"invalid episode shape C={ways} k={shots} q={queries}")
    names = ds.class_names
    if ways > len(names):
        raise SamplingError(f"{ways}-way episode needs {ways} classes, dataset has {len(names)}")
    picked = rng.choice(len(names), size=ways, replace=False)
    s_img, q_img, s_lab, q_lab = [], [], [], []
    for label, ci in enumerate(picked):
        imgs = ds.classes[names[ci]]
        if len(imgs) < shots + queries:
            raise SamplingError(
                f"class {names[ci]!r} has {len(imgs)} images, episode needs {shots + queries}"
            )
        idx = rng.choice(len(imgs), size=shots + queries, replace=False)
        s_img.append(imgs[idx[:shots]])
        q_img.append(imgs[idx[shots:]])
        s_lab += [label] * shots
        q_lab += [label] * queries
    n = ways * shots
    return Episode(
        support_images=np.concatenate(s_img),
        support_labels=np.array(s_lab, dtype=np.int64),
        query_images=np.concatenate(q_img),
        query_labels=np.array(q_lab, dtype=np.int64),
        ways=ways,
        shots=shots,
        queries=queries,
        write_order=rng.permutation(n),
        class_names=tuple(names[i] for i in picked),
    )


@dataclass(frozen=True)
class SamplingStrategy:
    """Per-episode (C, k) distribution.

    ``uniform``: fixed C and k. ``mixed_k``: fixed C, k uniform over a range.
    ``mixed_ck``: C and k drawn independently and uniformly from their ranges.
    """

    ways: tuple[int, ...]
    shots: tuple[int, ...]
    queries: int = 5

    def __post_init__(self):
        if not self.ways:
            raise SamplingError("strategy ways range is empty")
        if not self.shots:
            raise SamplingError("strategy shots range is empty")
        if min(self.ways) < 1 or min(self.shots) < 1:
            raise SamplingError("strategy ranges must be >= 1")
        if self.queries < 1:
            raise SamplingError("queries per class must be >= 1")

    @classmethod
    def uniform(cls, ways: int, shots: int, queries: int = 5) -> "SamplingStrategy":
        return cls((ways,), (shots,), queries)

    @classmethod
    def mixed_k(cls, ways: int, shots, queries: int = 5) -> "SamplingStrategy":
        return cls((ways,), tuple(shots), queries)

    @classmethod
    def mixed_ck(cls, ways, shots, queries: int = 5) -> "SamplingStrategy":
        return cls(tuple(ways), tuple(shots), queries)

    @property
    def kind(self) -> str:
        if len(self.ways) > 1:
            return "mixed_ck"
        return "mixed_k" if len(self.shots) > 1 else "uniform"

    def draw(self, rng: np.random.Generator) -> tuple[int, int]:
        C = self.ways[0] if len(self.ways) == 1 else int(self.ways[rng.integers(len(self.ways))])
        k = self.shots[0] if len(self.shots) == 1 else int(self.shots[rng.integers(len(self.shots))])
        return C, k


def sample_by_strategy(ds: Dataset, strategy: SamplingStrategy, rng: np.random.Generator) -> Episode:
    C, k = strategy.draw(rng)
    return sample_episode(ds, C, k, strategy.queries, rng)
