"""Random-projection kernel backend: scores from a damped projected-gradient Gram.

Per-example gradients are sketched with a seeded sign projection into a small
space; influence is the bilinear form through the damped inverse Gram of the
projected training gradients. Cheap and coarse by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..common import rng
from ..data import Dataset
from ..errors import InputError
from ..models import Checkpoint, network_for

_CHUNK = 4096


def _projection_chunk(seed: int, chunk_index: int, rows: int, dim: int) -> np.ndarray:
    signs = rng(seed, 0x97, chunk_index).integers(
        0, 2, size=(rows, dim)).astype(np.float64)
    return (2.0 * signs - 1.0) / np.sqrt(dim)


def _project(seed: int, dim: int, grads: np.ndarray) -> np.ndarray:
    out = np.zeros((len(grads), dim))
    for ci, lo in enumerate(range(0, grads.shape[1], _CHUNK)):
        block = grads[:, lo:lo + _CHUNK]
        out += block @ _projection_chunk(seed, ci, block.shape[1], dim)
    return out


@dataclass(frozen=True)
class ProjKernelCurvature:
    features: np.ndarray  # (N, dim) projected training gradients, in train order
    gram_cho: tuple
    damping: float
    seed: int
    dim: int
    train_digest: str

    def project(self, grads: np.ndarray) -> np.ndarray:
        return _project(self.seed, self.dim, grads)

    def solve(self, phi: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self.gram_cho, phi)


def fit_projkernel(ckpt: Checkpoint, train: Dataset, damping: float | None,
                   dim: int, seed: int, batch_size: int = 128) -> ProjKernelCurvature:
    net = network_for(ckpt.arch)
    n = len(train)
    features = np.zeros((n, dim))
    for lo in range(0, n, batch_size):
        positions = np.arange(lo, min(lo + batch_size, n))
        images, labels = train.batch(positions)
        grads = net.per_example_grads(ckpt.params, images, labels)
        features[positions] = _project(seed, dim, grads)
    gram = features.T @ features / n
    if damping is None:
        damping = 1e-3 * float(np.trace(gram)) / dim
        if damping <= 0.0:
            damping = 1e-8
    gram[np.diag_indices_from(gram)] += damping
    return ProjKernelCurvature(features, linalg.cho_factor(gram), float(damping),
                               seed, dim, train.digest())


def check_same_train(curv: ProjKernelCurvature, train: Dataset) -> None:
    if curv.train_digest != train.digest():
        raise InputError("projkernel curvature was fit on a different training set")
