from .dataset import (
    MINIIMAGENET,
    OMNIGLOT,
    Dataset,
    DatasetError,
    ImageSpec,
    Manifest,
    augment_rotations,
    load_dataset,
    load_split,
    read_manifest,
    write_dataset,
)
from .sampling import Episode, SamplingError, SamplingStrategy, sample_by_strategy, sample_episode
from .synthetic import glyph_dataset, glyph_splits

__all__ = [
    "MINIIMAGENET",
    "OMNIGLOT",
    "Dataset",
    "DatasetError",
    "Episode",
    "ImageSpec",
    "Manifest",
    "SamplingError",
    "SamplingStrategy",
    "augment_rotations",
    "glyph_dataset",
    "glyph_splits",
    "load_dataset",
    "load_split",
    "read_manifest",
    "sample_by_strategy",
    "sample_episode",
    "write_dataset",
]
