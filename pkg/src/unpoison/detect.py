"""Influence-shift detection: transformation deltas, count rule, reports.

The detector watches how each training point's influence on an attribution
target moves when the target is transformed (label flips and standard image
augmentations). Training points whose influence collapses under nearly every
transformation are flagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .common import canonical_json, digest_bytes
from .data import Dataset, LabeledExample
from .errors import ConfigurationError, InputError
from .influence import InfluenceConfig, influence_vectors
from .models import Checkpoint
from .transforms import TransformSpec, apply_transform, make_transform_suite


@dataclass(frozen=True)
class DeltaConfig:
    """Knobs of the influence-shift detector.

    Flag a point when at least ``n_b - n_tol`` transformations drop its
    influence below ``tau`` (negative by convention).
    """
    n_b: int = 8
    tau: float = 0.0
    n_tol: int = 1
    suite_mode: str = "both"  # both | label_only | image_only
    backend: InfluenceConfig = field(default_factory=InfluenceConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_tol < self.n_b:
            raise ConfigurationError("n_tol must satisfy 0 <= n_tol < n_b")
        if self.suite_mode not in ("both", "label_only", "image_only"):
            raise ConfigurationError(f"unknown suite mode '{self.suite_mode}'")

    def to_dict(self) -> dict:
        return {"n_b": self.n_b, "tau": self.tau, "n_tol": self.n_tol,
                "suite_mode": self.suite_mode, "seed": self.seed,
                "backend": self.backend.to_dict()}

# Hyperparameter grids that work well in practice for the count rule.
TAU_GRID = (0.0, -1.0, -5.0, -10.0, -100.0)
N_TOL_GRID = (0, 1, 2, 3)


@dataclass(frozen=True)
class DeltaMatrix:
    """Base influence vector and its per-transformation changes."""
    base: np.ndarray    # (N,)
    deltas: np.ndarray  # (N, n_b)
    ids: np.ndarray     # (N,) training ids aligned with rows
    suite: tuple
    test_id: int
    train_digest: str

    @property
    def n_b(self) -> int:
        return self.deltas.shape[1]


@dataclass(frozen=True)
class DetectionReport:
    detector: str
    flagged_ids: frozenset
    ids: np.ndarray      # (N,) training ids aligned with scores
    scores: np.ndarray   # (N,) continuous suspicion scores
    threshold: float     # flagged = {i : scores_i > threshold}
    config: dict
    train_digest: str
    metrics: dict | None = None

    def with_metrics(self, metrics: dict) -> "DetectionReport":
        return replace(self, metrics=metrics)

    def to_json(self) -> str:
        return json.dumps({
            "detector": self.detector, "config": self.config,
            "threshold": self.threshold,
            "flagged_ids": sorted(int(i) for i in self.flagged_ids),
            "ids": [int(i) for i in self.ids],
            "scores": [float(s) for s in self.scores],
            "train_digest": self.train_digest, "metrics": self.metrics,
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "DetectionReport":
        d = json.loads(text)
        return DetectionReport(d["detector"], frozenset(d["flagged_ids"]),
                               np.array(d["ids"], dtype=np.int64),
                               np.array(d["scores"]), d["threshold"],
                               d["config"], d["train_digest"], d["metrics"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def digest(self) -> str:
        return digest_bytes(canonical_json(json.loads(self.to_json())).encode())


def delta_matrix(ckpt: Checkpoint, curvature, test_ex: LabeledExample,
                 suite: list[TransformSpec], train: Dataset,
                 batch_size: int = 256) -> DeltaMatrix:
    """Influence change of every training point under each transformation.

    ``test_ex`` must already carry its attribution label (normally the
    model's prediction); transformed copies carry the suite's flipped labels.
    All columns share a single pass over the training set.
    """
    targets = [test_ex] + [apply_transform(test_ex, spec) for spec in suite]
    scores = influence_vectors(curvature, ckpt, targets, train, batch_size)
    base = scores[:, 0]
    return DeltaMatrix(base, scores[:, 1:] - base[:, None], train.ids.copy(),
                       tuple(suite), test_ex.id, train.digest())


def flag_count_rule(matrix: DeltaMatrix, tau: float, n_tol: int) -> frozenset:
    """Ids whose influence drops below tau under >= n_b - n_tol transforms."""
    if not 0 <= n_tol < matrix.n_b:
        raise ConfigurationError("n_tol must satisfy 0 <= n_tol < n_b")
    counts = (matrix.deltas < tau).sum(axis=1)
    return frozenset(int(i) for i in matrix.ids[counts >= matrix.n_b - n_tol])


def continuous_scores(matrix: DeltaMatrix, n_tol: int) -> np.ndarray:
    """Scalar suspicion scores whose threshold sweep reproduces the count rule.

    score_i = -(the (n_tol+1)-th largest row entry); then
    {score > -tau} equals flag_count_rule(tau, n_tol) exactly.
    """
    if not 0 <= n_tol < matrix.n_b:
        raise ConfigurationError("n_tol must satisfy 0 <= n_tol < n_b")
    kth = np.partition(matrix.deltas, matrix.n_b - n_tol - 1, axis=1)
    return -kth[:, matrix.n_b - n_tol - 1]


def detect_influence_shift(ckpt: Checkpoint, curvature, test_ex: LabeledExample,
                           train: Dataset, cfg: DeltaConfig,
                           suite: list[TransformSpec] | None = None,
                           matrix: DeltaMatrix | None = None
                           ) -> tuple[DetectionReport, DeltaMatrix]:
    """Full influence-shift detector for one attribution target."""
    if matrix is None:
        if suite is None:
            suite = make_transform_suite(cfg.n_b, cfg.suite_mode, test_ex.label,
                                         train.class_count, cfg.seed,
                                         channels=train.image_shape[0])
        matrix = delta_matrix(ckpt, curvature, test_ex, suite, train)
    flagged = flag_count_rule(matrix, cfg.tau, cfg.n_tol)
    scores = continuous_scores(matrix, cfg.n_tol)
    report = DetectionReport("influence-shift", flagged, matrix.ids, scores,
                             -cfg.tau, cfg.to_dict(), matrix.train_digest)
    return report, matrix


def multi_point_intersection(reports: list[DetectionReport], m_tol: int) -> frozenset:
    """Ids flagged in at least (m - m_tol) of the m reports."""
    if len(reports) < 2:
        raise InputError("need at least two reports to intersect")
    digests = {r.train_digest for r in reports}
    if len(digests) != 1:
        raise InputError("reports come from different training sets")
    if not 0 <= m_tol < len(reports):
        raise ConfigurationError("m_tol must satisfy 0 <= m_tol < m")
    counts: dict[int, int] = {}
    for report in reports:
        for i in report.flagged_ids:
            counts[i] = counts.get(i, 0) + 1
    need = len(reports) - m_tol
    return frozenset(i for i, c in counts.items() if c >= need)
