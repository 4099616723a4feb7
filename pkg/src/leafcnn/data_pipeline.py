"""Dataset manifests, the 38-class registry, dataset variants, leaf-grouped
train/test splitting and deterministic batching.

Manifest format: UTF-8 CSV with header ``path,crop,disease,leaf_group_id``;
an empty leaf_group_id marks a singleton group. Classes resolve through the
registry by (crop, disease).
"""

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

REGISTRY_RESOURCE = "class_registry_v1.csv"
SPLIT_FRACTIONS = (0.8, 0.6, 0.5, 0.4, 0.2)
VARIANTS = ("Color", "GrayScale", "Segmented")


class ManifestError(ValueError):
    """Missing file, malformed row, or unknown class label."""


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    crop: str
    disease: str


class ClassRegistry:
    """The ordered crop-disease class list: 38 classes over 14 crops."""

    def __init__(self, entries):
        self.entries = list(entries)
        self._by_pair = {(e.crop, e.disease): e.class_id for e in self.entries}
        self._by_crop = {}
        for e in self.entries:
            self._by_crop.setdefault(e.crop, []).append(e.class_id)
        self._validate()

    def _validate(self):
        if len(self._by_pair) != len(self.entries):
            raise ValueError("duplicate (crop, disease) pair in registry")
        for i, e in enumerate(self.entries):
            if e.class_id != i:
                raise ValueError(f"registry ids not consecutive at {e}")

    def __len__(self):
        return len(self.entries)

    @property
    def crops(self):
        return list(self._by_crop)

    @property
    def diseases(self):
        return sorted({e.disease for e in self.entries if e.disease != "healthy"})

    def class_id(self, crop, disease):
        try:
            return self._by_pair[(crop, disease)]
        except KeyError:
            raise KeyError(f"unknown class ({crop!r}, {disease!r})") from None

    def classes_for_crop(self, crop):
        try:
            return list(self._by_crop[crop])
        except KeyError:
            raise KeyError(f"unknown crop {crop!r}") from None

    def entry(self, class_id):
        return self.entries[class_id]


def load_registry():
    """Load the shipped versioned class registry."""
    text = resources.files("leafcnn.data").joinpath(REGISTRY_RESOURCE).read_text("utf-8")
    rows = list(csv.DictReader(text.splitlines()))
    return ClassRegistry(
        ClassEntry(i, row["crop"], row["disease"]) for i, row in enumerate(rows)
    )


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    class_id: int
    leaf_group_id: str | None = None
    known_crop: str | None = None


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.train_fraction not in SPLIT_FRACTIONS:
            raise ValueError(
                f"train fraction must be one of {SPLIT_FRACTIONS}, "
                f"got {self.train_fraction}"
            )


def load_manifest(path, registry=None):
    """Parse a manifest CSV into SampleRecords; errors name the line."""
    registry = registry or load_registry()
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        base = ["path", "crop", "disease", "leaf_group_id"]
        if header not in (base, base + ["known_crop"]):
            raise ManifestError(f"{path}:1: bad header {header!r}")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ManifestError(
                    f"{path}:{lineno}: expected {width} fields, got {len(row)}"
                )
            img, crop, disease, group = row[:4]
            known = row[4] if width == 5 else ""
            try:
                class_id = registry.class_id(crop, disease)
            except KeyError:
                raise ManifestError(
                    f"{path}:{lineno}: unknown class ({crop!r}, {disease!r})"
                ) from None
            records.append(SampleRecord(img, class_id, group or None, known or None))
    return records


def save_manifest(records, path, registry=None):
    registry = registry or load_registry()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "crop", "disease", "leaf_group_id"])
        for rec in records:
            entry = registry.entry(rec.class_id)
            writer.writerow(
                [rec.image_path, entry.crop, entry.disease, rec.leaf_group_id or ""]
            )


def grouped_split(records, spec):
    """Split records so that no leaf group straddles the boundary.

    Groups are shuffled by the spec seed, then greedily assigned to the
    training side until the target image count is reached; both sides
    preserve manifest order. Records without a leaf_group_id are singleton
    groups.
    """
    groups = {}
    order = []
    for idx, rec in enumerate(records):
        key = ("g", rec.leaf_group_id) if rec.leaf_group_id else ("s", idx)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(idx)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(order))
    target = spec.train_fraction * len(records)
    train_idx = set()
    count = 0
    for gi in perm:
        if count >= target:
            break
        members = groups[order[gi]]
        train_idx.update(members)
        count += len(members)
    train = [rec for i, rec in enumerate(records) if i in train_idx]
    test = [rec for i, rec in enumerate(records) if i not in train_idx]
    return train, test


def make_batches(records, batch_size, seed, epoch):
    """Deterministic per-(seed, epoch) shuffle, chunked; last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(len(records))
    shuffled = [records[i] for i in perm]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _load_rgb(path):
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise ManifestError(f"undecodable image {path}: {exc}") from exc


def prepare_image(path, variant, channel_means=None, size=256, seg_params=None):
    """Decode, resize and normalize one image into a [3, size, size] tensor.

    Color: bilinear resize, values scaled to [0,1]. GrayScale: luminance
    Y = 0.299R + 0.587G + 0.114B replicated to all three channels. Segmented:
    leaf mask applied (background zeroed), then treated as Color. Per-channel
    scalar means (computed over the training split) are subtracted last when
    provided.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    im = _load_rgb(path)
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / np.float32(255.0)  # H,W,3
    if variant == "Segmented":
        from . import segmentation
        params = seg_params or segmentation.SegmentationParams()
        mask = segmentation.compute_leaf_mask(arr, params)
        arr = segmentation.apply_mask(arr, mask)
    elif variant == "GrayScale":
        y = (0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2])
        arr = np.repeat(y[:, :, None].astype(np.float32), 3, axis=2)
    out = arr.transpose(2, 0, 1).copy()
    if channel_means is not None:
        out -= np.asarray(channel_means, dtype=np.float32).reshape(3, 1, 1)
    return out


def channel_means(tensors):
    """Per-channel scalar means over a collection of [3,H,W] tensors."""
    sums = np.zeros(3, dtype=np.float64)
    count = 0
    for t in tensors:
        sums += t.reshape(3, -1).sum(axis=1)
        count += t.shape[1] * t.shape[2]
    return (sums / count).astype(np.float32)
