"""Image datasets laid out as ``root/<split>/<class>/<image files>``.

A ``dataset.toml`` manifest at ``root`` declares the image spec and the
split directories::

    [image]
    channels = 1
    height = 28
    width = 28

    [splits]
    train = "train"
    test = "test"
    val = "val"            # optional

    [augment]
    rotations = true       # 0/90/180/270 degree copies become new classes
    rotate_eval = true     # also rotate non-train splits

Accepted encodings: 8-bit PGM/PPM (binary or ASCII) and PNG.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm", ".png"}
MANIFEST = "dataset.toml"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSpec:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DatasetError(f"channels must be 1 or 3, got {self.channels}")
        if self.height < 1 or self.width < 1:
            raise DatasetError(f"image size must be positive, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


OMNIGLOT = ImageSpec(1, 28, 28)
MINIIMAGENET = ImageSpec(3, 84, 84)


@dataclass
class Dataset:
    """Class name -> float32 array [n_images, C, H, W] with values in [0, 1]."""

    classes: dict[str, np.ndarray]
    spec: ImageSpec
    split: str = "train"

    @property
    def class_names(self) -> list[str]:
        return list(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def min_images(self) -> int:
        return min(len(v) for v in self.classes.values())


@dataclass(frozen=True)
class Manifest:
    root: Path
    spec: ImageSpec
    splits: dict[str, str]
    rotations: bool = False
    rotate_eval: bool = True


def read_manifest(root) -> Manifest:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    try:
        img = doc["image"]
        spec = ImageSpec(int(img["channels"]), int(img["height"]), int(img["width"]))
        splits = {str(k): str(v) for k, v in doc["splits"].items()}
    except KeyError as exc:
        raise DatasetError(f"{path}: missing field {exc}") from exc
    aug = doc.get("augment", {})
    return Manifest(root, spec, splits, bool(aug.get("rotations", False)), bool(aug.get("rotate_eval", True)))


def decode_image(path: Path, spec: ImageSpec) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if spec.channels == 1 else "RGB")
            if im.size != (spec.width, spec.height):
                im = im.resize((spec.width, spec.height), Image.LANCZOS)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def load_dataset(split_dir, spec: ImageSpec, split: str = "train") -> Dataset:
    """Decode every class folder under ``split_dir``."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise DatasetError(f"split directory {split_dir} does not exist")
    classes = {}
    for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class folder {class_dir} contains no images")
        classes[class_dir.name] = np.stack([decode_image(f, spec) for f in files])
    if not classes:
        raise DatasetError(f"split directory {split_dir} has no class folders")
    log.info("loaded %d classes from %s", len(classes), split_dir)
    return Dataset(classes, spec, split)


def load_split(root, split: str) -> Dataset:
    """Load one split named in the manifest, applying its augmentation settings."""
    man = read_manifest(root)
    if split not in man.splits:
        raise DatasetError(f"split {split!r} not declared in {man.root / MANIFEST}")
    check_split_hygiene(man)
    ds = load_dataset(man.root / man.splits[split], man.spec, split)
    if man.rotations and (split == "train" or man.rotate_eval):
        ds = augment_rotations(ds)
    return ds


def check_split_hygiene(man: Manifest) -> None:
    seen: dict[str, str] = {}
    for split, sub in man.splits.items():
        d = man.root / sub
        if not d.is_dir():
            continue
        for p in d.iterdir():
            if p.is_dir():
                if p.name in seen and seen[p.name] != split:
                    raise DatasetError(f"class {p.name!r} appears in splits {seen[p.name]!r} and {split!r}")
                seen[p.name] = split


def augment_rotations(ds: Dataset) -> Dataset:
    """Every class becomes four classes: rotations by 0, 90, 180 and 270 degrees."""
    if ds.spec.height != ds.spec.width:
        raise DatasetError(f"rotation augmentation needs square images, got {ds.spec.height}x{ds.spec.width}")
    out = {}
    for name, imgs in ds.classes.items():
        for quarter in range(4):
            out[f"{name}@rot{90 * quarter}"] = np.ascontiguousarray(np.rot90(imgs, quarter, axes=(2, 3)))
    return Dataset(out, ds.spec, ds.split)


def write_netpbm(path: Path, image: np.ndarray) -> None:
    """Write a [C, H, W] image in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    body = arr[0] if c == 1 else arr.transpose(1, 2, 0)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body.tobytes())


def write_dataset(root, splits: dict[str, Dataset], rotations: bool = False) -> Path:
    """Materialize in-memory splits in the on-disk layout, with a manifest."""
    import tomli_w

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spec = next(iter(splits.values())).spec
    for split, ds in splits.items():
        for name, imgs in ds.classes.items():
            d = root / split / name
            d.mkdir(parents=True, exist_ok=True)
            ext = ".pgm" if spec.channels == 1 else ".ppm"
            for i, img in enumerate(imgs):
                write_netpbm(d / f"{i:04d}{ext}", img)
    doc = {
        "image": {"channels": spec.channels, "height": spec.height, "width": spec.width},
        "splits": {s: s for s in splits},
        "augment": {"rotations": rotations, "rotate_eval": True},
    }
    (root / MANIFEST).write_text(tomli_w.dumps(doc))
    return root
