"""Image and dataset handling.

Images are numpy arrays of shape (H, W, C) with C in {1, 3} and float
pixels in [0, 1].  8-bit files are converted on the way in by /255 and on
the way out by round(x*255).  Datasets keep all images stacked in one
(N, H, W, C) array, which every consumer (oracles, attacks, evaluation)
indexes directly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import ConsistencyError, FormatError
from .rng import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def validate_image(arr: np.ndarray) -> np.ndarray:
    """Check the (H, W, C) / [0,1] contract, returning the array unchanged."""
    if arr.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c not in (1, 3):
        raise ValueError(f"bad image shape {arr.shape}: need H,W >= 1 and C in {{1,3}}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite pixels")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixels outside [0,1]: min={lo}, max={hi}")
    return arr


@dataclass
class LabeledDataset:
    """Uniformly shaped images with integer class labels.

    ``split_tag`` records which side of the patch-train / eval split the
    dataset sits on; freshly loaded data defaults to "eval".
    """

    images: np.ndarray  # (N, H, W, C) float in [0,1]
    labels: np.ndarray  # (N,) int
    num_classes: int
    split_tag: str = "eval"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split_tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            split_tag=split_tag if split_tag is not None else self.split_tag,
        )


def _read_be32(f, path) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise FormatError(f"{path}: truncated IDX header")
    return struct.unpack(">I", data)[0]


def load_idx_dataset(
    images_path, labels_path, limit: int | None = None
) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, magic 0x803/0x801).

    Pixels come back scaled to [0,1]; labels are validated against the
     10-class digit convention.  ``limit`` keeps only the first N items.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError(f"{images_path}: expected {count} images, file truncated")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols, 1)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be32(f, labels_path)
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise FormatError(f"{labels_path}: expected {label_count} labels, file truncated")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise ConsistencyError(
            f"image count {count} != label count {label_count} "
            f"({images_path} vs {labels_path})"
        )
    if limit is not None:
        count = min(limit, count)
        pixels = pixels[:count]
        labels = labels[:count]
    if len(labels) and labels.max() > 9:
        raise ConsistencyError(f"{labels_path}: IDX labels must be digits 0-9")
    images = pixels.astype(np.float32) / 255.0
    return LabeledDataset(images=images, labels=labels, num_classes=10)


def load_image_dir_dataset(root, manifest_path) -> LabeledDataset:
    """Load 8-bit PNGs listed in a manifest file.

    Manifest format: a ``#shape H W C`` header, optionally ``#classes K``,
    then one ``relative/path<TAB>label`` line per image.  Images are
    resized (bilinear) to the declared shape.  Without a ``#classes``
    header the class count is max(label)+1.
    """
    from pathlib import Path

    root = Path(root)
    shape = None
    num_classes = None
    entries: list[tuple[str, int]] = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#shape"):
                parts = line.split()
                if len(parts) != 4:
                    raise FormatError(f"{manifest_path}:{lineno}: bad #shape line")
                shape = (int(parts[1]), int(parts[2]), int(parts[3]))
                continue
            if line.startswith("#classes"):
                num_classes = int(line.split()[1])
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(
                    f"{manifest_path}:{lineno}: expected 'path<TAB>label', got {line!r}"
                )
            entries.append((parts[0], int(parts[1])))

    if shape is None:
        raise FormatError(f"{manifest_path}: missing '#shape H W C' header")
    h, w, c = shape
    if c not in (1, 3):
        raise FormatError(f"{manifest_path}: channels must be 1 or 3, got {c}")

    if num_classes is None:
        num_classes = (max(lbl for _, lbl in entries) + 1) if entries else 1
    for rel, lbl in entries:
        if lbl < 0 or lbl >= num_classes:
            raise ConsistencyError(
                f"{manifest_path}: label {lbl} for {rel!r} outside [0, {num_classes})"
            )

    images = np.zeros((len(entries), h, w, c), dtype=np.float32)
    labels = np.zeros(len(entries), dtype=np.int64)
    for i, (rel, lbl) in enumerate(entries):
        path = root / rel
        try:
            img = PILImage.open(path)
            img = img.convert("L" if c == 1 else "RGB")
        except Exception as exc:
            raise FormatError(f"cannot decode image {path}: {exc}") from exc
        if img.size != (w, h):
            img = img.resize((w, h), PILImage.Resampling.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        images[i] = arr[..., None] if c == 1 else arr
        labels[i] = lbl
    return LabeledDataset(images=images, labels=labels, num_classes=num_classes)


def split_dataset(
    d: LabeledDataset, n_patch_train: int, rng: Rng
) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint shuffled split into (patch-train, eval) parts.

    The first part gets ``n_patch_train`` items; together the parts cover
    the input exactly once.  The permutation comes from ``rng``, so equal
    seeds give equal splits.
    """
    if n_patch_train < 0 or n_patch_train > len(d):
        raise ValueError(
            f"n_patch_train={n_patch_train} outside [0, {len(d)}]"
        )
    perm = rng.gen.permutation(len(d))
    train_idx = np.sort(perm[:n_patch_train])
    eval_idx = np.sort(perm[n_patch_train:])
    return (
        d.subset(train_idx, split_tag="train-patch"),
        d.subset(eval_idx, split_tag="eval"),
    )


def write_png(path, arr: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit PNG (grayscale for C=1, RGB for C=3)."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    validate_image(arr)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        img = PILImage.fromarray(data[..., 0], mode="L")
    else:
        img = PILImage.fromarray(data, mode="RGB")
    img.save(path, format="PNG")


def read_png(path, channels: int | None = None) -> np.ndarray:
    """Read an 8-bit PNG as a (H, W, C) float image in [0,1]."""
    try:
        img = PILImage.open(path)
        if channels == 1:
            img = img.convert("L")
        elif channels == 3:
            img = img.convert("RGB")
        elif img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
    except Exception as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr
