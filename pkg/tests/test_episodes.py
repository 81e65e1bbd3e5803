import math
from collections import Counter

import numpy as np
import pytest

from mematch.episodes import (
    Dataset,
    DatasetError,
    ImageSpec,
    SamplingError,
    SamplingStrategy,
    augment_rotations,
    glyph_dataset,
    glyph_splits,
    load_dataset,
    load_split,
    read_manifest,
    sample_by_strategy,
    sample_episode,
    write_dataset,
)
from mematch.episodes.dataset import write_netpbm
from mematch.rng import stream
from oracles import pixel_nn_accuracy


@pytest.fixture(scope="module")
def small():
    return glyph_dataset(10, 20, np.random.default_rng(0))


# loading


def test_synthetic_tree_loads(tmp_path):
    sp = glyph_splits(1, train_classes=3, test_classes=2, per_class=4)
    root = write_dataset(tmp_path / "ds", {"train": sp["train"], "test": sp["test"]})
    man = read_manifest(root)
    assert man.spec == ImageSpec(1, 16, 16)
    ds = load_split(root, "train")
    assert len(ds) == 3
    for name, imgs in ds.classes.items():
        assert imgs.shape == (4, 1, 16, 16)
        # 8-bit quantization is the only loss on the round trip
        np.testing.assert_allclose(imgs, sp["train"].classes[name], atol=0.5 / 255 + 1e-6)


def test_empty_class_folder_is_named(tmp_path):
    split = tmp_path / "train"
    (split / "alpha").mkdir(parents=True)
    write_netpbm(split / "alpha" / "0.pgm", np.zeros((1, 4, 4)))
    (split / "beta").mkdir()
    with pytest.raises(DatasetError, match="beta"):
        load_dataset(split, ImageSpec(1, 4, 4))


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        read_manifest(tmp_path)


def test_undeclared_split(tmp_path):
    sp = glyph_splits(1, train_classes=2, test_classes=2, per_class=2)
    root = write_dataset(tmp_path, {"train": sp["train"]})
    with pytest.raises(DatasetError, match="not declared"):
        load_split(root, "test")


def test_split_overlap_rejected(tmp_path):
    ds = glyph_dataset(2, 2, np.random.default_rng(0), prefix="c")
    root = write_dataset(tmp_path, {"train": ds, "test": ds})
    with pytest.raises(DatasetError, match="appears in splits"):
        load_split(root, "train")


def test_images_are_resized_to_spec(tmp_path):
    d = tmp_path / "train" / "a"
    d.mkdir(parents=True)
    write_netpbm(d / "0.pgm", np.ones((1, 10, 10)))
    ds = load_dataset(tmp_path / "train", ImageSpec(1, 28, 28))
    assert ds.classes["a"].shape == (1, 1, 28, 28)


# rotation augmentation


def test_rotations_quadruple_classes(small):
    rot = augment_rotations(small)
    assert len(rot) == 4 * len(small)
    name = small.class_names[0]
    np.testing.assert_array_equal(rot.classes[f"{name}@rot0"], small.classes[name])


def test_rotate_180_twice_is_identity(small):
    img = small.classes[small.class_names[0]]
    once = augment_rotations(small).classes[f"{small.class_names[0]}@rot180"]
    twice = np.rot90(once, 2, axes=(2, 3))
    np.testing.assert_array_equal(twice, img)


def test_rotations_from_manifest(tmp_path):
    sp = glyph_splits(2, train_classes=3, test_classes=2, per_class=2)
    root = write_dataset(tmp_path, {"train": sp["train"], "test": sp["test"]}, rotations=True)
    assert len(load_split(root, "train")) == 12


def test_rotation_needs_square():
    ds = Dataset({"a": np.zeros((2, 1, 4, 6), dtype=np.float32)}, ImageSpec(1, 4, 6), "train")
    with pytest.raises(DatasetError, match="square"):
        augment_rotations(ds)


# sampling


def test_episode_shapes_and_labels(small):
    ep = sample_episode(small, 5, 3, 4, np.random.default_rng(0))
    assert ep.support_images.shape == (15, 1, 16, 16)
    assert ep.query_images.shape == (20, 1, 16, 16)
    assert ep.support_labels.tolist() == [c for c in range(5) for _ in range(3)]
    assert ep.query_labels.tolist() == [c for c in range(5) for _ in range(4)]
    assert sorted(ep.write_order.tolist()) == list(range(15))
    assert len(ep.support) == 15 and len(ep.query) == 20


def _image_key(img):
    return img.tobytes()


def test_sampling_invariants_10k(small):
    """Classes distinct, support and query disjoint, labels consistent with classes."""
    rng = np.random.default_rng(1)
    lookup = {_image_key(img): name for name, imgs in small.classes.items() for img in imgs}
    for _ in range(10_000):
        C, k, q = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
        ep = sample_episode(small, C, k, q, rng)
        assert len(set(ep.class_names)) == C
        s_keys = [_image_key(i) for i in ep.support_images]
        q_keys = [_image_key(i) for i in ep.query_images]
        assert not set(s_keys) & set(q_keys)
        assert len(set(s_keys)) == C * k
        for key, lab in zip(s_keys + q_keys, ep.support_labels.tolist() + ep.query_labels.tolist()):
            assert lookup[key] == ep.class_names[lab]


def test_class_selection_is_uniform(small):
    """Each class appears with probability C/N; counts stay within 3 sigma."""
    rng = np.random.default_rng(2)
    n, C = 4000, 3
    counts = Counter()
    for _ in range(n):
        counts.update(sample_episode(small, C, 1, 1, rng).class_names)
    p = C / len(small)
    sigma = math.sqrt(n * p * (1 - p))
    for name in small.class_names:
        assert abs(counts[name] - n * p) < 3 * sigma, (name, counts[name])


def test_too_many_ways(small):
    with pytest.raises(SamplingError, match="11-way"):
        sample_episode(small, 11, 1, 1, np.random.default_rng(0))


def test_too_few_images(small):
    with pytest.raises(SamplingError, match="episode needs 21"):
        sample_episode(small, 2, 20, 1, np.random.default_rng(0))


def test_sampling_deterministic(small):
    a = sample_episode(small, 5, 2, 3, stream(9, "episodes", 4))
    b = sample_episode(small, 5, 2, 3, stream(9, "episodes", 4))
    assert a.support_images.tobytes() == b.support_images.tobytes()
    assert a.query_images.tobytes() == b.query_images.tobytes()
    assert a.write_order.tolist() == b.write_order.tolist()


# strategies


def test_strategy_kinds():
    assert SamplingStrategy.uniform(5, 1).kind == "uniform"
    assert SamplingStrategy.mixed_k(5, range(1, 6)).kind == "mixed_k"
    assert SamplingStrategy.mixed_ck(range(2, 6), range(1, 6)).kind == "mixed_ck"


def test_strategy_empty_range():
    with pytest.raises(SamplingError, match="shots range is empty"):
        SamplingStrategy.mixed_k(5, range(3, 1))


def test_uniform_strategy_fixed(small):
    rng = np.random.default_rng(0)
    for _ in range(50):
        ep = sample_by_strategy(small, SamplingStrategy.uniform(4, 2, 3), rng)
        assert (ep.ways, ep.shots, ep.queries) == (4, 2, 3)


def test_mixed_ck_covers_grid(small):
    rng = np.random.default_rng(0)
    strat = SamplingStrategy.mixed_ck(range(2, 6), range(1, 6))
    seen = Counter()
    for _ in range(2000):
        ep = sample_by_strategy(small, strat, rng)
        seen[(ep.ways, ep.shots)] += 1
    assert set(seen) == {(c, k) for c in range(2, 6) for k in range(1, 6)}
    expected = 2000 / 20
    sigma = math.sqrt(2000 * (1 / 20) * (19 / 20))
    assert all(abs(v - expected) < 4 * sigma for v in seen.values())


def test_mixed_k_keeps_ways(small):
    rng = np.random.default_rng(0)
    strat = SamplingStrategy.mixed_k(5, range(1, 6))
    shots = {sample_by_strategy(small, strat, rng).shots for _ in range(200)}
    assert shots == {1, 2, 3, 4, 5}


# generator


def test_glyph_splits_disjoint_and_sized():
    sp = glyph_splits(0, val_classes=4)
    assert (len(sp["train"]), len(sp["val"]), len(sp["test"])) == (32, 4, 8)
    assert sp["train"].spec.shape == (1, 16, 16)
    names = [set(sp[s].class_names) for s in ("train", "val", "test")]
    assert not (names[0] & names[1]) and not (names[0] & names[2]) and not (names[1] & names[2])
    for imgs in sp["train"].classes.values():
        assert imgs.shape == (20, 1, 16, 16)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_glyph_splits_deterministic():
    a, b = glyph_splits(5), glyph_splits(5)
    for name in a["test"].class_names:
        assert a["test"].classes[name].tobytes() == b["test"].classes[name].tobytes()


def test_glyph_mask_density():
    from mematch.episodes.synthetic import class_mask

    rng = np.random.default_rng(0)
    for smooth in (0.0, 1.0):
        m = class_mask(rng, 8, 0.4, smooth)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert m.sum() == round(0.4 * 64)


def test_glyph_held_out_split_is_separable():
    """The raw-pixel nearest-neighbour oracle clears 0.90 on the held-out split."""
    sp = glyph_splits(0)
    assert pixel_nn_accuracy(sp["test"], 5, 1, 15, 200, seed=0) >= 0.90
