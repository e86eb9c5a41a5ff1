"""Analysis harnesses: counterfactual complement removal and attribution-target choice."""

from __future__ import annotations

from dataclasses import dataclass

from .attacks import PoisonCampaign
from .data import Dataset, LabeledExample
from .detect import DeltaConfig, DetectionReport, detect_influence_shift
from .errors import InputError
from .influence import fit_curvature
from .metrics import GroundTruth, detection_metrics, poison_success_rate
from .models import ArchSpec, Checkpoint, TrainConfig, evaluate_accuracy, with_predicted_label
from .unlearn import ForgetSet, eu_retrain


@dataclass(frozen=True)
class RemovalArm:
    name: str
    removed_ids: frozenset
    tpr_of_removed: float
    psr: float
    test_accuracy: float

    def to_dict(self) -> dict:
        return {"name": self.name, "removed": len(self.removed_ids),
                "tpr_of_removed": self.tpr_of_removed, "psr": self.psr,
                "test_accuracy": self.test_accuracy}


def _removal_arm(name: str, removed, campaign: PoisonCampaign, arch: ArchSpec,
                 train_set: Dataset, test: Dataset, cfg: TrainConfig) -> RemovalArm:
    removed = frozenset(int(i) for i in removed)
    truth = GroundTruth.of_campaign(campaign)
    tpr = len(removed & truth.poison_ids) / len(truth.poison_ids)
    ckpt = eu_retrain(arch, train_set, ForgetSet(removed), cfg)
    return RemovalArm(name, removed, tpr,
                      poison_success_rate(ckpt, campaign, test),
                      evaluate_accuracy(ckpt, test))


def counterfactual_study(campaign: PoisonCampaign, detected, arch: ArchSpec,
                         train_set: Dataset, test: Dataset, cfg: TrainConfig,
                         warn_empty: bool = True) -> tuple[RemovalArm, RemovalArm]:
    """Retrain twice: drop the detected set vs drop the undetected poisons.

    The complement arm removes exactly the true poisons the detector missed
    (never any clean point), so its accuracy cannot suffer false-positive
    removals.
    """
    detected = frozenset(int(i) for i in detected)
    truth = GroundTruth.of_campaign(campaign)
    complement = truth.poison_ids - detected
    if not complement and warn_empty:
        import warnings
        warnings.warn("complement set is empty; the study is degenerate")
    original = _removal_arm("original", detected, campaign, arch, train_set,
                            test, cfg)
    complement_arm = _removal_arm("complement", complement, campaign, arch,
                                  train_set, test, cfg)
    return original, complement_arm


@dataclass(frozen=True)
class AttributionArm:
    target_kind: str  # "test" | "train"
    report: DetectionReport
    psr_after_removal: float
    test_accuracy_after_removal: float


def attribution_target_study(campaign: PoisonCampaign, arch: ArchSpec,
                             train_set: Dataset, test: Dataset,
                             poisoned_ckpt: Checkpoint, detect_cfg: DeltaConfig,
                             train_cfg: TrainConfig,
                             test_target: LabeledExample
                             ) -> tuple[AttributionArm, AttributionArm]:
    """Compare attribution anchored at an affected test point vs a known poison.

    Both runs use the identical detector configuration; only the target
    differs. Each flagged set is removed with exact retraining and scored.
    """
    poisoned_positions = [train_set.position_of(i)
                          for i in sorted(campaign.poison_ids)]
    if not poisoned_positions:
        raise InputError("campaign has no poison ids")
    train_target = train_set.example(poisoned_positions[0])

    arms = []
    curvature = fit_curvature(poisoned_ckpt, train_set, detect_cfg.backend)
    for kind, target in (("test", test_target), ("train", train_target)):
        target = with_predicted_label(poisoned_ckpt, target)
        report, _ = detect_influence_shift(poisoned_ckpt, curvature, target,
                                           train_set, detect_cfg)
        truth = GroundTruth.of_campaign(campaign)
        report = report.with_metrics(
            detection_metrics(report.flagged_ids, report.scores, report.ids,
                              truth).to_dict())
        ckpt = eu_retrain(arch, train_set, ForgetSet(report.flagged_ids),
                          train_cfg) if report.flagged_ids else poisoned_ckpt
        arms.append(AttributionArm(kind, report,
                                   poison_success_rate(ckpt, campaign, test),
                                   evaluate_accuracy(ckpt, test)))
    return arms[0], arms[1]
