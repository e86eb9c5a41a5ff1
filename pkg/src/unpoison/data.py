"""Synthetic shape datasets, deterministic splits, and on-disk formats.

Images are float64 arrays of shape ``(channels, height, width)`` with values
in ``[0, 1]``. A :class:`Dataset` is array-backed: stacked pixels, labels and
stable integer ids. Generated pixel values are snapped to the float32 grid so
that saving and reloading a dataset is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .common import digest_arrays, rng
from .errors import ConfigurationError, InputError

SHAPE_ORDER = ("disk", "cross", "triangle", "bar", "ring", "wedge")

# Distinct per-class tints for 3-channel rendering.
_TINTS = np.array(
    [(1.0, 0.3, 0.3), (0.3, 1.0, 0.3), (0.3, 0.4, 1.0),
     (1.0, 1.0, 0.3), (1.0, 0.4, 1.0), (0.3, 1.0, 1.0)]
)


@dataclass(frozen=True)
class LabeledExample:
    id: int
    image: np.ndarray  # (C, H, W) float64 in [0, 1]
    label: int


@dataclass(frozen=True)
class Dataset:
    """Ordered labeled images with stable ids.

    ``images`` has shape (N, C, H, W); ``labels`` and ``ids`` have shape (N,).
    Treat all arrays as immutable; operations return new datasets.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise InputError("dataset must contain at least one (C, H, W) image")
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise InputError("images, labels and ids must have equal length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InputError("labels must lie in [0, class_count)")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InputError("ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def example(self, position: int) -> LabeledExample:
        return LabeledExample(int(self.ids[position]), self.images[position],
                              int(self.labels[position]))

    def position_of(self, example_id: int) -> int:
        pos = np.nonzero(self.ids == example_id)[0]
        if len(pos) == 0:
            raise InputError(f"id {example_id} not in dataset")
        return int(pos[0])

    def batch(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Single access path for pixels/labels; test doubles override this."""
        return self.images[positions], self.labels[positions]

    def take(self, positions: np.ndarray, split_tag: str | None = None) -> "Dataset":
        images, labels = self.batch(np.asarray(positions))
        return Dataset(images, labels, self.ids[positions], self.class_count,
                       split_tag or self.split_tag)

    def subset_by_ids(self, keep_ids, split_tag: str | None = None) -> "Dataset":
        mask = np.isin(self.ids, np.fromiter(keep_ids, dtype=np.int64))
        positions = np.nonzero(mask)[0]
        if len(positions) == 0:
            raise InputError("subset would be empty")
        return self.take(positions, split_tag)

    def drop_ids(self, drop, split_tag: str | None = None) -> "Dataset":
        mask = ~np.isin(self.ids, np.fromiter(drop, dtype=np.int64))
        positions = np.nonzero(mask)[0]
        if len(positions) == 0:
            raise InputError("dropping those ids would empty the dataset")
        return self.take(positions, split_tag)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return replace(self, images=images)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return replace(self, labels=labels)

    def digest(self) -> str:
        meta = {"class_count": self.class_count, "split_tag": self.split_tag,
                "shape": list(self.images.shape)}
        return digest_arrays(meta, [self.images.astype("<f4"),
                                    self.labels.astype("<u2"),
                                    self.ids.astype("<u4")])


def _render_shape(kind: str, side: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    width = max(radius * 0.35, 1.2)
    if kind == "disk":
        return dist <= radius
    if kind == "cross":
        return ((np.abs(dx) <= width) | (np.abs(dy) <= width)) & (dist <= radius * 1.25)
    if kind == "triangle":
        # Upward triangle: below the apex, inside two slanted edges.
        return (dy >= -radius) & (dy <= radius * 0.8) & (np.abs(dx) <= (dy + radius) * 0.7)
    if kind == "bar":
        return (np.abs(dy) <= width) & (np.abs(dx) <= radius * 1.2)
    if kind == "ring":
        return (dist <= radius) & (dist >= radius * 0.55)
    if kind == "wedge":
        return (dist <= radius * 1.15) & (dx >= 0) & (dy >= 0)
    raise ConfigurationError(f"unknown shape kind '{kind}'")


def generate_shapes_dataset(class_count: int, per_class: int, side: int = 28,
                            noise: float = 0.05, seed: int = 0, channels: int = 1,
                            split_tag: str = "train") -> Dataset:
    """Procedurally rendered geometric-shape classes with jitter and noise.

    Dark shapes on a light background so that corner-patch triggers (black
    pixels) remain visible. Deterministic for a given seed.
    """
    if class_count < 2:
        raise ConfigurationError("need at least 2 classes")
    if per_class <= 0:
        raise ConfigurationError("per_class must be positive")
    if side < 16:
        raise ConfigurationError("side length must be at least 16")
    if class_count > len(SHAPE_ORDER):
        raise ConfigurationError(f"at most {len(SHAPE_ORDER)} shape classes available")
    if channels not in (1, 3):
        raise ConfigurationError("channels must be 1 or 3")

    g = rng(seed)
    n = class_count * per_class
    images = np.empty((n, channels, side, side), dtype=np.float64)
    labels = np.repeat(np.arange(class_count), per_class)
    for i, label in enumerate(labels):
        cy = side / 2 + g.uniform(-0.15, 0.15) * side
        cx = side / 2 + g.uniform(-0.15, 0.15) * side
        radius = g.uniform(0.22, 0.34) * side
        mask = _render_shape(SHAPE_ORDER[label], side, cy, cx, radius)
        base = np.full((side, side), 0.82)
        base[mask] = 0.18
        if channels == 1:
            img = base[None]
        else:
            tint = _TINTS[label]
            img = np.repeat(base[None], 3, axis=0)
            img[:, mask] = (1.0 - tint[:, None]) * 0.18 + tint[:, None] * 0.45
        img = img + g.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)

    order = g.permutation(n)
    images, labels = images[order], labels[order]
    images = images.astype(np.float32).astype(np.float64)  # snap to disk grid
    ids = np.arange(n, dtype=np.int64)
    return Dataset(images, labels, ids, class_count, split_tag)


def split(dataset: Dataset, fractions: list[float], seed: int = 0,
          tags: list[str] | None = None) -> list[Dataset]:
    """Disjoint partition with floor-then-distribute sizes, deterministic in seed."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ConfigurationError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("fractions must sum to 1")
    n = len(dataset)
    sizes = [int(np.floor(f * n)) for f in fractions]
    for i in range(n - sum(sizes)):
        sizes[i % len(sizes)] += 1
    order = rng(seed).permutation(n)
    out, start = [], 0
    for k, size in enumerate(sizes):
        positions = np.sort(order[start:start + size])
        tag = tags[k] if tags else dataset.split_tag
        out.append(dataset.take(positions, split_tag=tag))
        start += size
    return out


# --- native persistence -----------------------------------------------------
#
# A dataset directory holds manifest.json plus three flat little-endian blobs
# in id order: pixels.f32, labels.u16, ids.u32.

def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    manifest = {"format": "unpoison-dataset-v1", "count": n, "channels": c,
                "height": h, "width": w, "class_count": dataset.class_count,
                "split_tag": dataset.split_tag}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    dataset.images.astype("<f4").tofile(directory / "pixels.f32")
    dataset.labels.astype("<u2").tofile(directory / "labels.u16")
    dataset.ids.astype("<u4").tofile(directory / "ids.u32")


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "unpoison-dataset-v1":
        raise InputError(f"not a dataset directory: {directory}")
    n, c = manifest["count"], manifest["channels"]
    h, w = manifest["height"], manifest["width"]
    images = np.fromfile(directory / "pixels.f32", dtype="<f4").reshape(n, c, h, w)
    labels = np.fromfile(directory / "labels.u16", dtype="<u2").astype(np.int64)
    ids = np.fromfile(directory / "ids.u32", dtype="<u4").astype(np.int64)
    return Dataset(images.astype(np.float64), labels, ids,
                   manifest["class_count"], manifest["split_tag"])


# --- IDX ingestion -----------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def load_idx_images(path: str | Path) -> np.ndarray:
    """Grayscale IDX image file -> (N, 1, H, W) float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != _IDX_IMAGES_MAGIC:
        raise InputError(f"bad IDX image magic 0x{magic:08x}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if pixels.size != n * h * w:
        raise InputError("IDX image payload size mismatch")
    return pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0


def load_idx_labels(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, n = struct.unpack(">II", raw[:8])
    if magic != _IDX_LABELS_MAGIC:
        raise InputError(f"bad IDX label magic 0x{magic:08x}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.size != n:
        raise InputError("IDX label payload size mismatch")
    return labels.astype(np.int64)


def load_idx_dataset(image_path: str | Path, label_path: str | Path,
                     class_count: int | None = None, split_tag: str = "train") -> Dataset:
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if len(images) != len(labels):
        raise InputError("IDX image/label counts differ")
    k = class_count if class_count is not None else int(labels.max()) + 1
    images = images.astype(np.float32).astype(np.float64)
    return Dataset(images, labels, np.arange(len(images), dtype=np.int64), k, split_tag)
