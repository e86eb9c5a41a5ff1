"""Test-point transformations: label flips plus standard image augmentations.

A :class:`TransformSpec` is a fully seeded description of one transformation,
so applying it to the same example always yields the same output. Parameters
may be pinned through ``op_params``; anything unpinned is sampled from the
spec's own seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import ndimage

from .common import rng
from .data import LabeledExample
from .errors import ConfigurationError, UnsupportedOperationError

# Augmentation families available for sampling; identity is reserved for the
# label-only mode and is never sampled as an augmentation.
AUGMENTATION_FAMILIES = ("flip", "rotation", "color_jitter", "elastic",
                         "blur", "inversion", "color_switch", "random_affine")
IMAGE_OPS = AUGMENTATION_FAMILIES + ("identity",)

_CHANNEL_PERMS = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]


@dataclass(frozen=True)
class TransformSpec:
    image_op: str
    label_mode: str  # "keep" | "random_distinct"
    class_count: int
    seed: int
    op_params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.image_op not in IMAGE_OPS:
            raise ConfigurationError(f"unknown image op '{self.image_op}'")
        if self.label_mode not in ("keep", "random_distinct"):
            raise ConfigurationError(f"unknown label mode '{self.label_mode}'")
        if self.label_mode == "random_distinct" and self.class_count < 2:
            raise ConfigurationError("label flipping needs at least 2 classes")


def _param(spec: TransformSpec, name: str, sample) -> float:
    if name in spec.op_params:
        return float(spec.op_params[name])
    return float(sample())


def _per_plane(image: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(plane) for plane in image])


def apply_image_op(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply the spec's image operation; output clipped to [0, 1], same shape."""
    g = rng(spec.seed, 0)
    op = spec.image_op

    if op == "identity":
        return image.copy()
    if op == "flip":
        out = image[:, :, ::-1]
    elif op == "inversion":
        out = 1.0 - image
    elif op == "rotation":
        angle = _param(spec, "angle", lambda: g.uniform(-30.0, 30.0))
        out = _per_plane(image, lambda p: ndimage.rotate(
            p, angle, reshape=False, order=1, mode="nearest"))
    elif op == "blur":
        sigma = _param(spec, "sigma", lambda: g.uniform(0.6, 1.4))
        out = _per_plane(image, lambda p: ndimage.gaussian_filter(p, sigma))
    elif op == "color_jitter":
        contrast = _param(spec, "contrast", lambda: g.uniform(0.7, 1.3))
        brightness = _param(spec, "brightness", lambda: g.uniform(-0.15, 0.15))
        out = (image - image.mean()) * contrast + image.mean() + brightness
        if image.shape[0] == 3:
            channel_gain = g.uniform(0.85, 1.15, size=3)
            out = out * channel_gain[:, None, None]
    elif op == "color_switch":
        if image.shape[0] != 3:
            raise UnsupportedOperationError("color_switch needs a 3-channel image")
        perm = _CHANNEL_PERMS[int(_param(spec, "perm",
                                         lambda: g.integers(len(_CHANNEL_PERMS))))]
        out = image[list(perm)]
    elif op == "elastic":
        alpha = _param(spec, "alpha", lambda: 4.0)
        sigma = _param(spec, "sigma", lambda: 2.0)
        h, w = image.shape[1:]
        dy = ndimage.gaussian_filter(g.uniform(-1, 1, size=(h, w)), sigma)
        dx = ndimage.gaussian_filter(g.uniform(-1, 1, size=(h, w)), sigma)
        dy *= alpha / max(np.abs(dy).max(), 1e-12)
        dx *= alpha / max(np.abs(dx).max(), 1e-12)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = [yy + dy, xx + dx]
        out = _per_plane(image, lambda p: ndimage.map_coordinates(
            p, coords, order=1, mode="nearest"))
    elif op == "random_affine":
        angle = np.deg2rad(_param(spec, "angle", lambda: g.uniform(-15.0, 15.0)))
        scale = _param(spec, "scale", lambda: g.uniform(0.9, 1.1))
        h, w = image.shape[1:]
        ty = _param(spec, "ty", lambda: g.uniform(-0.1, 0.1) * h)
        tx = _param(spec, "tx", lambda: g.uniform(-0.1, 0.1) * w)
        cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
        matrix = np.array([[cos, -sin], [sin, cos]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - matrix @ (center + np.array([ty, tx]))
        out = _per_plane(image, lambda p: ndimage.affine_transform(
            p, matrix, offset=offset, order=1, mode="nearest"))
    else:  # pragma: no cover - guarded by TransformSpec validation
        raise ConfigurationError(f"unknown image op '{op}'")

    return np.clip(out, 0.0, 1.0)


def apply_transform(example: LabeledExample, spec: TransformSpec) -> LabeledExample:
    """Transform an example; a flipped label is always distinct from the input's."""
    image = apply_image_op(example.image, spec)
    label = example.label
    if spec.label_mode == "random_distinct":
        candidates = [c for c in range(spec.class_count) if c != example.label]
        label = int(candidates[rng(spec.seed, 1).integers(len(candidates))])
    return LabeledExample(example.id, image, label)


def make_transform_suite(n_b: int, mode: str, base_label: int, class_count: int,
                         seed: int, channels: int = 3) -> list[TransformSpec]:
    """Build ``n_b`` transform specs for one attribution target.

    mode "both": augmentation + random distinct label; "label_only": identity
    image with a random distinct label; "image_only": augmentation, label kept.
    Augmentations are cycled through a seeded shuffle of the family pool so
    each family appears once before any repeats.
    """
    if n_b < 1:
        raise ConfigurationError("n_b must be at least 1")
    if mode not in ("both", "label_only", "image_only"):
        raise ConfigurationError(f"unknown suite mode '{mode}'")
    if mode != "image_only" and class_count < 2:
        raise ConfigurationError("label flipping needs at least 2 classes")
    if not 0 <= base_label < class_count:
        raise ConfigurationError("base_label out of range")

    g = rng(seed)
    pool = [op for op in AUGMENTATION_FAMILIES
            if not (channels == 1 and op == "color_switch")]
    order = list(g.permutation(pool))
    label_mode = "keep" if mode == "image_only" else "random_distinct"
    specs = []
    for j in range(n_b):
        op = "identity" if mode == "label_only" else str(order[j % len(order)])
        specs.append(TransformSpec(image_op=op, label_mode=label_mode,
                                   class_count=class_count,
                                   seed=int(g.integers(2**63 - 1))))
    return specs
