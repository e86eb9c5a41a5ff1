"""Poisoning attacks: corner-patch, low-frequency trigger, gradient matching.

A :class:`PoisonCampaign` is the durable description of an attack. Poisoned
datasets are always *derived* by :func:`apply_campaign` from the clean data
plus the campaign, so persistence of (clean dataset, campaign) reproduces the
poisoned training set bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import fft as sfft

from .common import canonical_json, digest_bytes, rng
from .data import Dataset, LabeledExample
from .errors import (ConfigurationError, CraftingFailedError, InputError,
                     UnsupportedOperationError)
from .models import Checkpoint, loss_and_grad, network_for, predict

# 3x3 checkerboard with the corners and the center set (True = stamped black).
_CHECKER = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=bool)


@dataclass(frozen=True)
class PatchPayload:
    """Black checkerboard patch anchored at the bottom-right corner."""
    size: int = 3
    value: float = 0.0


@dataclass(frozen=True)
class FrequencyPayload:
    """Full-image additive field from a fixed set of low-index DCT basis terms."""
    basis_indices: tuple = ((0, 1), (1, 0), (1, 1), (2, 1))
    amplitude: float = 6.0 / 255.0


@dataclass(frozen=True)
class PerImageDeltas:
    deltas: np.ndarray  # (n_poisons, C, H, W), aligned with sorted poison ids
    eps: float


@dataclass(frozen=True)
class PoisonCampaign:
    kind: str  # badnet | smooth | witches_brew
    victim_class: int
    target_class: int
    poison_ids: frozenset
    payload: Union[PatchPayload, FrequencyPayload, PerImageDeltas]
    eps: float | None = None
    target_example: LabeledExample | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("badnet", "smooth", "witches_brew"):
            raise ConfigurationError(f"unknown attack kind '{self.kind}'")
        if self.kind != "witches_brew" and self.victim_class == self.target_class:
            raise ConfigurationError("victim and target class must differ")

    def describe(self) -> dict:
        return {"kind": self.kind, "victim_class": self.victim_class,
                "target_class": self.target_class,
                "poison_ids": sorted(self.poison_ids), "eps": self.eps,
                "seed": self.seed}

    def digest(self) -> str:
        return digest_bytes(canonical_json(self.describe()).encode())


# -- payload application -------------------------------------------------------

def _stamp_patch(images: np.ndarray, payload: PatchPayload) -> np.ndarray:
    out = images.copy()
    n = payload.size
    out[..., -n:, -n:][..., _CHECKER] = payload.value
    return out


def frequency_pattern(payload: FrequencyPayload, height: int, width: int) -> np.ndarray:
    """Inverse-DCT field normalized to the payload amplitude in max norm."""
    coeff = np.zeros((height, width))
    for i, j in payload.basis_indices:
        coeff[i, j] = 1.0
    field = sfft.idctn(coeff, norm="ortho")
    peak = np.abs(field).max()
    if peak > 0:
        field = field * (payload.amplitude / peak)
    return field


def _add_pattern(images: np.ndarray, payload: FrequencyPayload) -> np.ndarray:
    field = frequency_pattern(payload, images.shape[-2], images.shape[-1])
    return np.clip(images + field, 0.0, 1.0)


def stamp_trigger(image: np.ndarray, campaign: PoisonCampaign) -> np.ndarray:
    """Apply the campaign's test-time trigger to one image."""
    if campaign.kind == "badnet":
        return _stamp_patch(image, campaign.payload)
    if campaign.kind == "smooth":
        return _add_pattern(image, campaign.payload)
    raise UnsupportedOperationError(
        "witches_brew has no test-time trigger; evaluate its target example")


def apply_campaign(train: Dataset, campaign: PoisonCampaign) -> Dataset:
    """Derive the poisoned training set; non-poison rows are untouched."""
    ids = np.array(sorted(campaign.poison_ids), dtype=np.int64)
    positions = np.array([train.position_of(i) for i in ids])
    images = train.images.copy()
    labels = train.labels.copy()
    if campaign.kind == "badnet":
        images[positions] = _stamp_patch(images[positions], campaign.payload)
        labels[positions] = campaign.target_class
    elif campaign.kind == "smooth":
        images[positions] = _add_pattern(images[positions], campaign.payload)
        labels[positions] = campaign.target_class
    else:
        deltas = campaign.payload.deltas
        if len(deltas) != len(positions):
            raise InputError("campaign deltas do not match poison ids")
        images[positions] = np.clip(images[positions] + deltas, 0.0, 1.0)
    return train.with_images(images).with_labels(labels)


# -- campaign construction -------------------------------------------------------

def _choose_poisons(train: Dataset, source_class: int, count: int, seed: int) -> frozenset:
    pool = train.ids[train.labels == source_class]
    if count > len(pool):
        raise ConfigurationError(f"requested {count} poisons but class "
                                 f"{source_class} has only {len(pool)} examples")
    if count <= 0:
        raise ConfigurationError("poison count must be positive")
    chosen = rng(seed).choice(pool, size=count, replace=False)
    return frozenset(int(i) for i in chosen)


def poison_badnet(train: Dataset, victim: int, target: int, count: int,
                  seed: int = 0) -> tuple[Dataset, PoisonCampaign]:
    campaign = PoisonCampaign("badnet", victim, target,
                              _choose_poisons(train, victim, count, seed),
                              PatchPayload(), seed=seed)
    return apply_campaign(train, campaign), campaign


def poison_smooth(train: Dataset, victim: int, target: int, count: int,
                  amplitude: float = 6.0 / 255.0, seed: int = 0
                  ) -> tuple[Dataset, PoisonCampaign]:
    if amplitude <= 0:
        raise ConfigurationError("amplitude must be positive")
    campaign = PoisonCampaign("smooth", victim, target,
                              _choose_poisons(train, victim, count, seed),
                              FrequencyPayload(amplitude=amplitude), seed=seed)
    return apply_campaign(train, campaign), campaign


def matching_cosine(ckpt: Checkpoint, images: np.ndarray, labels: np.ndarray,
                    target_grad: np.ndarray) -> float:
    """Cosine between the summed batch gradient and a fixed target gradient."""
    net = network_for(ckpt.arch)
    _, batch_grad = net.loss_and_grad_sum(ckpt.params, images, labels)
    denom = np.linalg.norm(batch_grad) * np.linalg.norm(target_grad)
    if denom == 0:
        return 0.0
    return float(batch_grad @ target_grad / denom)


def poison_witches_brew(train: Dataset, ckpt: Checkpoint,
                        target_example: LabeledExample, adversarial_label: int,
                        count: int, eps: float, steps: int, seed: int = 0,
                        step_size: float | None = None
                        ) -> tuple[Dataset, PoisonCampaign]:
    """Clean-label poisons via signed-gradient ascent on gradient matching.

    Perturbs images of the adversarial-label class so their summed training
    gradient aligns with the gradient of the target example taken at the
    adversarial label; labels are never modified. Deltas stay inside the
    max-norm ball of radius eps and poisons stay valid images in [0, 1].
    """
    if target_example.label == adversarial_label:
        raise ConfigurationError("the target's true class must differ from the "
                                 "adversarial label")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    poison_ids = _choose_poisons(train, adversarial_label, count, seed)
    ids = sorted(poison_ids)
    positions = np.array([train.position_of(i) for i in ids])
    base, labels = train.batch(positions)

    poison_target = LabeledExample(target_example.id, target_example.image,
                                   adversarial_label)
    _, target_grad = loss_and_grad(ckpt, poison_target)
    target_norm = np.linalg.norm(target_grad)
    if not np.isfinite(target_norm) or target_norm == 0:
        raise CraftingFailedError("target gradient is degenerate")

    net = network_for(ckpt.arch)
    alpha = step_size if step_size is not None else eps / 10.0
    deltas = np.zeros_like(base)
    for _ in range(steps):
        _, batch_grad = net.loss_and_grad_sum(ckpt.params, base + deltas, labels)
        norm = np.linalg.norm(batch_grad)
        dot = batch_grad @ target_grad
        if not np.isfinite(norm) or not np.isfinite(dot):
            raise CraftingFailedError("gradient-matching objective became non-finite")
        if norm == 0:
            break
        cosine_grad_u = (target_grad / (norm * target_norm)
                         - dot / (norm**3 * target_norm) * batch_grad)
        step_grad = net.input_grad_of_grad_dot(ckpt.params, base + deltas,
                                               labels, cosine_grad_u)
        deltas = deltas + alpha * np.sign(step_grad)
        deltas = np.clip(deltas, -eps, eps)
        deltas = np.clip(base + deltas, 0.0, 1.0) - base

    campaign = PoisonCampaign("witches_brew", target_example.label,
                              adversarial_label, poison_ids,
                              PerImageDeltas(deltas, eps), eps=eps,
                              target_example=target_example, seed=seed)
    return apply_campaign(train, campaign), campaign


# -- affected test points ---------------------------------------------------------

def find_affected_test_points(ckpt: Checkpoint, campaign: PoisonCampaign,
                              test: Dataset, k: int = 1) -> list[LabeledExample]:
    """Triggered test images the poisoned model misclassifies into the target.

    Returned examples carry the stamped image and the model's (target)
    prediction as their label, ascending by id. For the gradient-matching
    attack the single affected point is the campaign's own target example.
    """
    if campaign.kind == "witches_brew":
        ex = campaign.target_example
        pred = int(predict(ckpt, ex.image[None])[0])
        return [LabeledExample(ex.id, ex.image, pred)]
    victim_pos = np.nonzero(test.labels == campaign.victim_class)[0]
    if len(victim_pos) == 0:
        raise InputError("test set has no victim-class examples")
    stamped = stamp_trigger(test.images[victim_pos], campaign)
    preds = predict(ckpt, stamped)
    hits = victim_pos[preds == campaign.target_class]
    order = np.argsort(test.ids[hits])
    out = []
    for pos in hits[order][:k]:
        where = np.nonzero(victim_pos == pos)[0][0]
        out.append(LabeledExample(int(test.ids[pos]), stamped[where],
                                  campaign.target_class))
    return out


# -- persistence -------------------------------------------------------------------

def save_campaign(campaign: PoisonCampaign, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "unpoison-campaign-v1", **campaign.describe()}
    blobs: dict[str, np.ndarray] = {}
    p = campaign.payload
    if isinstance(p, PatchPayload):
        manifest["payload"] = {"type": "patch", "size": p.size, "value": p.value}
    elif isinstance(p, FrequencyPayload):
        manifest["payload"] = {"type": "frequency", "amplitude": p.amplitude,
                               "basis_indices": [list(ij) for ij in p.basis_indices]}
    else:
        manifest["payload"] = {"type": "deltas", "eps": p.eps}
        blobs["deltas"] = p.deltas
    if campaign.target_example is not None:
        ex = campaign.target_example
        manifest["target_example"] = {"id": ex.id, "label": ex.label}
        blobs["target_image"] = ex.image
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    np.savez(directory / "payload.npz", **blobs)


def load_campaign(directory: str | Path) -> PoisonCampaign:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "unpoison-campaign-v1":
        raise InputError(f"not a campaign directory: {directory}")
    blobs = np.load(directory / "payload.npz")
    pd = manifest["payload"]
    if pd["type"] == "patch":
        payload = PatchPayload(pd["size"], pd["value"])
    elif pd["type"] == "frequency":
        payload = FrequencyPayload(tuple(tuple(ij) for ij in pd["basis_indices"]),
                                   pd["amplitude"])
    else:
        payload = PerImageDeltas(blobs["deltas"], pd["eps"])
    target = None
    if "target_example" in manifest:
        te = manifest["target_example"]
        target = LabeledExample(te["id"], blobs["target_image"], te["label"])
    return PoisonCampaign(manifest["kind"], manifest["victim_class"],
                          manifest["target_class"],
                          frozenset(manifest["poison_ids"]), payload,
                          manifest["eps"], target, manifest["seed"])
