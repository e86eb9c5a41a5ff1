"""Reference detectors to compare the influence-shift rule against.

All baselines emit the same :class:`DetectionReport` shape: continuous
suspicion scores per training point plus the flagged set obtained by
thresholding them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from sklearn.cluster import KMeans

from .data import Dataset, LabeledExample
from .detect import DetectionReport
from .errors import DetectorFailedError, TrainingDivergedError
from .influence import influence_vector
from .models import (Checkpoint, TrainConfig, batch_activations, mlp1,
                     network_for, train)

# Grid-searched defaults; middle of the ranges that behave well per class.
SPECTRAL_THRESHOLD_GRID = (4.0, 6.0, 8.0, 10.0)
CONTRIB_THRESHOLD_GRID = (7.0, 9.0, 11.0, 13.0)
NAIVE_THRESHOLD_GRID = (0.0, 10.0, 100.0, 500.0)


def baseline_naive_influence(ckpt: Checkpoint, curvature,
                             test_ex: LabeledExample, train_set: Dataset,
                             threshold: float = 0.0) -> DetectionReport:
    """Flag training points whose raw influence on the target exceeds a bar."""
    scores = influence_vector(curvature, ckpt, test_ex, train_set)
    flagged = frozenset(int(i) for i in train_set.ids[scores > threshold])
    return DetectionReport("naive-influence", flagged, train_set.ids.copy(),
                           scores, float(threshold), {"threshold": threshold},
                           train_set.digest())


def _pca_project(x: np.ndarray, n_comp: int) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:min(n_comp, vt.shape[0])].T


def baseline_activation_clustering(ckpt: Checkpoint, train_set: Dataset,
                                   n_comp: int = 3, seed: int = 0) -> DetectionReport:
    """Two-means clustering of last-hidden activations per class.

    The smaller cluster of each class is flagged; the score is the relative
    distance margin toward the smaller cluster's centroid, thresholded at 0.5.
    """
    acts = batch_activations(ckpt, train_set.images)
    scores = np.full(len(train_set), 0.0)
    flagged: set[int] = set()
    for cls in range(train_set.class_count):
        members = np.nonzero(train_set.labels == cls)[0]
        if len(members) < 2:
            warnings.warn(f"class {cls} has fewer than 2 members; skipped")
            continue
        projected = _pca_project(acts[members], n_comp)
        km = KMeans(n_clusters=2, n_init=10, random_state=seed).fit(projected)
        counts = np.bincount(km.labels_, minlength=2)
        small = int(np.argmin(counts))
        d_small = np.linalg.norm(projected - km.cluster_centers_[small], axis=1)
        d_large = np.linalg.norm(projected - km.cluster_centers_[1 - small], axis=1)
        scores[members] = d_large / np.maximum(d_small + d_large, 1e-12)
        flagged.update(int(i) for i in train_set.ids[members[km.labels_ == small]])
    return DetectionReport("activation-clustering", frozenset(flagged),
                           train_set.ids.copy(), scores, 0.5,
                           {"n_comp": n_comp, "seed": seed}, train_set.digest())


def baseline_spectral_signatures(ckpt: Checkpoint, train_set: Dataset,
                                 spectral_threshold: float = 6.0,
                                 contrib_threshold: float = 11.0) -> DetectionReport:
    """Outlier scores along each class's top singular direction.

    A class only contributes flags when its leading singular value dominates
    the median one by ``spectral_threshold``; flagged points then exceed
    mean + (contrib_threshold / 10) standard deviations in squared projection.
    """
    acts = batch_activations(ckpt, train_set.images)
    scores = np.zeros(len(train_set))
    flagged: set[int] = set()
    for cls in range(train_set.class_count):
        members = np.nonzero(train_set.labels == cls)[0]
        if len(members) < 2:
            warnings.warn(f"class {cls} has fewer than 2 members; skipped")
            continue
        centered = acts[members] - acts[members].mean(axis=0)
        _, sing, vt = np.linalg.svd(centered, full_matrices=False)
        if sing[0] <= 0:
            warnings.warn(f"class {cls} activations are degenerate; skipped")
            continue
        projection_sq = np.square(centered @ vt[0])
        scores[members] = projection_sq
        median_sv = np.median(sing)
        if median_sv > 0 and sing[0] > spectral_threshold * median_sv:
            bar = projection_sq.mean() + (contrib_threshold / 10.0) * projection_sq.std()
            flagged.update(int(i) for i in train_set.ids[members[projection_sq > bar]])
    return DetectionReport("spectral-signatures", frozenset(flagged),
                           train_set.ids.copy(), scores, float("nan"),
                           {"spectral_threshold": spectral_threshold,
                            "contrib_threshold": contrib_threshold},
                           train_set.digest())


# -- frequency-domain defense ---------------------------------------------------


@dataclass(frozen=True)
class FreqDefenseConfig:
    hidden: int = 32
    epochs: int = 6
    batch_size: int = 128
    learning_rate: float = 0.05
    confidence: float = 0.5
    patch_fraction: float = 0.5  # synthetic triggers: corner patches vs fields


def _dct_features(images: np.ndarray) -> np.ndarray:
    return sfft.dctn(images, axes=(-2, -1), norm="ortho")


def _synthesize_triggered(images: np.ndarray, cfg: FreqDefenseConfig,
                          g: np.random.Generator) -> np.ndarray:
    """Stamp random corner patches / random low-frequency fields."""
    out = images.copy()
    n, _, h, w = out.shape
    n_patch = int(round(cfg.patch_fraction * n))
    for i in range(n):
        if i < n_patch:
            size = int(g.integers(2, 5))
            corner = int(g.integers(4))
            value = g.uniform(0.0, 0.2)
            ys = slice(0, size) if corner in (0, 1) else slice(h - size, h)
            xs = slice(0, size) if corner in (0, 2) else slice(w - size, w)
            out[i, :, ys, xs] = value
        else:
            coeff = np.zeros((h, w))
            for _ in range(int(g.integers(2, 5))):
                coeff[int(g.integers(0, 4)), int(g.integers(0, 4))] = g.uniform(-1, 1)
            coeff[0, 0] = 0.0
            field = sfft.idctn(coeff, norm="ortho")
            peak = np.abs(field).max()
            if peak > 0:
                field *= g.uniform(4.0, 16.0) / 255.0 / peak
            out[i] = np.clip(out[i] + field, 0.0, 1.0)
    return out


class FrequencyDefense:
    """Classifier over 2D-DCT features separating clean from trigger-like images."""

    def __init__(self, cfg: FreqDefenseConfig = FreqDefenseConfig(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.ckpt: Checkpoint | None = None

    def fit(self, clean_images: np.ndarray) -> "FrequencyDefense":
        g = np.random.default_rng(np.random.SeedSequence([self.seed, 0xF4]))
        triggered = _synthesize_triggered(clean_images, self.cfg, g)
        features = _dct_features(np.concatenate([clean_images, triggered]))
        labels = np.concatenate([np.zeros(len(clean_images), dtype=np.int64),
                                 np.ones(len(triggered), dtype=np.int64)])
        order = g.permutation(len(features))
        dataset = Dataset(features[order], labels[order],
                          np.arange(len(features), dtype=np.int64), 2,
                          split_tag="freqdef")
        arch = mlp1(features.shape[1:], 2, hidden=self.cfg.hidden)
        try:
            self.ckpt = train(arch, dataset,
                              TrainConfig(epochs=self.cfg.epochs,
                                          batch_size=self.cfg.batch_size,
                                          learning_rate=self.cfg.learning_rate,
                                          seed=self.seed))
        except TrainingDivergedError as exc:
            raise DetectorFailedError(f"frequency classifier diverged: {exc}") from exc
        return self

    def scores(self, images: np.ndarray) -> np.ndarray:
        """Probability each image carries a trigger-like frequency signature."""
        if self.ckpt is None:
            raise DetectorFailedError("frequency defense has not been fit")
        net = network_for(self.ckpt.arch)
        logits = net.logits(self.ckpt.params, _dct_features(images))
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs[:, 1]


def baseline_frequency_defense(train_set: Dataset,
                               cfg: FreqDefenseConfig = FreqDefenseConfig(),
                               seed: int = 0) -> DetectionReport:
    defense = FrequencyDefense(cfg, seed).fit(train_set.images)
    scores = defense.scores(train_set.images)
    flagged = frozenset(int(i) for i in train_set.ids[scores > cfg.confidence])
    return DetectionReport("frequency-defense", flagged, train_set.ids.copy(),
                           scores, cfg.confidence,
                           {"hidden": cfg.hidden, "epochs": cfg.epochs,
                            "confidence": cfg.confidence, "seed": seed},
                           train_set.digest())
