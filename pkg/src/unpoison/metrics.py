"""Detection and attack-outcome metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .attacks import PoisonCampaign, stamp_trigger
from .data import Dataset
from .detect import DetectionReport
from .errors import InputError
from .models import Checkpoint, predict


@dataclass(frozen=True)
class GroundTruth:
    poison_ids: frozenset

    @staticmethod
    def of_campaign(campaign: PoisonCampaign) -> "GroundTruth":
        return GroundTruth(frozenset(campaign.poison_ids))


@dataclass(frozen=True)
class MetricsBundle:
    tpr: float | None = None
    precision: float | None = None
    auroc: float | None = None
    psr: float | None = None
    test_accuracy: float | None = None
    empty_flagged: bool = False

    def __post_init__(self):
        for name in ("tpr", "precision", "auroc", "psr", "test_accuracy"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InputError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"tpr": self.tpr, "precision": self.precision,
                "auroc": self.auroc, "psr": self.psr,
                "test_accuracy": self.test_accuracy,
                "empty_flagged": self.empty_flagged}


def auroc_score(scores: np.ndarray, positive_mask: np.ndarray) -> float:
    """Rank-statistic area under the ROC curve with tie averaging."""
    n_pos = int(positive_mask.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AuROC needs both positive and negative examples")
    ranks = rankdata(scores)
    rank_sum = ranks[positive_mask].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def detection_metrics(flagged, scores: np.ndarray | None, ids: np.ndarray,
                      truth: GroundTruth) -> MetricsBundle:
    """TPR, precision, and (when scores are given) AuROC versus ground truth.

    Precision of an empty flagged set is reported as 1.0 with the
    ``empty_flagged`` marker set, keeping result tables numeric.
    """
    if not truth.poison_ids:
        raise InputError("ground truth must be non-empty")
    flagged = frozenset(int(i) for i in flagged)
    hits = len(flagged & truth.poison_ids)
    tpr = hits / len(truth.poison_ids)
    empty = len(flagged) == 0
    precision = 1.0 if empty else hits / len(flagged)
    auroc = None
    if scores is not None:
        if len(scores) != len(ids):
            raise InputError("scores and ids lengths differ")
        positive = np.isin(ids, np.fromiter(truth.poison_ids, dtype=np.int64))
        auroc = auroc_score(np.asarray(scores, dtype=np.float64), positive)
    return MetricsBundle(tpr=tpr, precision=precision, auroc=auroc,
                         empty_flagged=empty)


def metrics_for_report(report: DetectionReport, truth: GroundTruth) -> MetricsBundle:
    return detection_metrics(report.flagged_ids, report.scores, report.ids, truth)


def poison_success_rate(ckpt: Checkpoint, campaign: PoisonCampaign,
                        test: Dataset) -> float:
    """Fraction of triggered victim-class test images classified as the target.

    For the gradient-matching attack the single target example is evaluated,
    so the rate is exactly 0 or 1.
    """
    if campaign.kind == "witches_brew":
        ex = campaign.target_example
        return float(predict(ckpt, ex.image[None])[0] == campaign.target_class)
    victim = np.nonzero(test.labels == campaign.victim_class)[0]
    if len(victim) == 0:
        raise InputError("test set has no victim-class examples")
    stamped = stamp_trigger(test.images[victim], campaign)
    return float((predict(ckpt, stamped) == campaign.target_class).mean())
