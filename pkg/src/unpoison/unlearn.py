"""Unlearning algorithms applied to a flagged forget set.

Five strategies: exact retraining on the retain set, continued fine-tuning,
diagonal-importance weight dampening, ascent-plus-distillation, and
bad-teacher distillation. All are deterministic given their seeds; with an
empty forget set and a zero update budget every method except retraining
returns the input parameters unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import rng
from .data import Dataset
from .errors import InputError, UnlearningDivergedError
from .models import ArchSpec, Checkpoint, TrainConfig, continue_training, network_for, train


@dataclass(frozen=True)
class ForgetSet:
    ids: frozenset

    @staticmethod
    def of(ids) -> "ForgetSet":
        return ForgetSet(frozenset(int(i) for i in ids))


SSD_SELECTION_GRID = (2.0, 10.0, 50.0)
SSD_DAMPENING_GRID = (0.01, 0.1, 1.0)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 2
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class ScrubConfig:
    max_steps: int = 3       # ascent+distill cycles
    min_steps: int = 1       # trailing distill-only cycles
    temperature: float = 2.0
    learning_rate: float = 0.01
    ascent_learning_rate: float = 0.002
    batch_size: int = 128
    seed: int = 0


@dataclass(frozen=True)
class BadTeacherConfig:
    temperature: float = 2.0
    epochs: int = 3
    learning_rate: float = 0.01
    batch_size: int = 128
    seed: int = 0


def _split(train_set: Dataset, forget: ForgetSet):
    forget_ids = forget.ids & set(int(i) for i in train_set.ids)
    retain_positions = np.nonzero(~np.isin(train_set.ids,
                                           np.fromiter(forget_ids, dtype=np.int64)))[0]
    if len(retain_positions) == 0:
        raise InputError("retain set would be empty")
    forget_positions = np.nonzero(np.isin(train_set.ids,
                                          np.fromiter(forget_ids, dtype=np.int64)))[0]
    return retain_positions, forget_positions


def eu_retrain(arch: ArchSpec, train_set: Dataset, forget: ForgetSet,
               cfg: TrainConfig) -> Checkpoint:
    """Exact unlearning: fresh training on the retain set only."""
    retain_positions, _ = _split(train_set, forget)
    return train(arch, train_set.take(retain_positions), cfg)


def cf_finetune(ckpt: Checkpoint, train_set: Dataset, forget: ForgetSet,
                cfg: FinetuneConfig) -> Checkpoint:
    """Continue training the given checkpoint on the retain set."""
    retain_positions, _ = _split(train_set, forget)
    train_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                            learning_rate=cfg.learning_rate,
                            momentum=cfg.momentum, seed=cfg.seed)
    return continue_training(ckpt, train_set.take(retain_positions), train_cfg)


def diagonal_importance(ckpt: Checkpoint, images: np.ndarray,
                        labels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean squared per-example gradient, one pass, no sampling."""
    net = network_for(ckpt.arch)
    total = np.zeros(net.param_count)
    n = len(images)
    for lo in range(0, n, batch_size):
        _, stats = net.layer_stats(ckpt.params, images[lo:lo + batch_size],
                                   labels[lo:lo + batch_size])
        for l, a, s in stats:
            start, _ = net.layer_offsets[l.name]
            gw = total[start:start + l.w_size]
            gb = total[start + l.w_size:start + l.n_params]
            if a.ndim == 3:
                g = np.einsum("bto,bti->boi", s, a)
                gw += np.square(g).sum(axis=0).ravel()
                gb += np.square(s.sum(axis=1)).sum(axis=0)
            else:
                gw += (np.square(s).T @ np.square(a)).ravel()
                gb += np.square(s).sum(axis=0)
    return total / n


def ssd_dampen(ckpt: Checkpoint, train_set: Dataset, forget: ForgetSet,
               selection_threshold: float, dampening_constant: float) -> Checkpoint:
    """Shrink parameters disproportionately important to the forget set.

    Where forget-set importance exceeds ``selection_threshold`` times the
    full-train importance, multiply the parameter by
    min(1, dampening_constant * importance_train / importance_forget).
    """
    _, forget_positions = _split(train_set, forget)
    if len(forget_positions) == 0:
        return ckpt.with_params(ckpt.params.copy())
    all_positions = np.arange(len(train_set))
    imp_train = diagonal_importance(ckpt, *train_set.batch(all_positions))
    imp_forget = diagonal_importance(ckpt, *train_set.batch(forget_positions))
    selected = imp_forget > selection_threshold * imp_train
    params = ckpt.params.copy()
    if selected.any():
        ratio = np.ones_like(params)
        np.divide(imp_train, imp_forget, out=ratio, where=selected)
        factor = np.minimum(1.0, dampening_constant * ratio)
        params[selected] *= factor[selected]
    return ckpt.with_params(params)


def _soft_targets(logits: np.ndarray, temperature: float) -> np.ndarray:
    scaled = logits / temperature
    scaled -= scaled.max(axis=1, keepdims=True)
    p = np.exp(scaled)
    return p / p.sum(axis=1, keepdims=True)


def _distill_step(net, params, images, labels, teacher_probs, temperature,
                  with_labels: bool):
    """Gradient and loss of T^2 * KL(teacher || student) (+ CE when asked)."""
    logits = net.logits(params, images)
    student = _soft_targets(logits, temperature)
    safe = np.clip(student, 1e-12, None)
    loss = temperature**2 * float(
        np.sum(teacher_probs * (np.log(np.clip(teacher_probs, 1e-12, None))
                                - np.log(safe)), axis=1).mean())
    dlogits = temperature * (student - teacher_probs)
    if with_labels:
        hard = _soft_targets(logits, 1.0)
        losses = -np.log(np.clip(hard[np.arange(len(labels)), labels], 1e-12, None))
        loss += float(losses.mean())
        hard[np.arange(len(labels)), labels] -= 1.0
        dlogits = dlogits + hard
    grad = net.grad_sum_from_dlogits(params, images, dlogits) / len(images)
    return loss, grad


def scrub(ckpt: Checkpoint, train_set: Dataset, forget: ForgetSet,
          cfg: ScrubConfig) -> Checkpoint:
    """Alternate forget-set gradient ascent with retain-set distillation.

    The teacher is the input checkpoint; distillation combines soft-target
    KL at the configured temperature with cross-entropy on retain labels.
    Non-finite losses abort with the partial parameters flagged invalid.
    """
    retain_positions, forget_positions = _split(train_set, forget)
    net = network_for(ckpt.arch)
    params = ckpt.params.copy()
    teacher = ckpt.params
    shuffle = rng(cfg.seed, 0x5C)

    def batches(positions):
        order = positions[shuffle.permutation(len(positions))]
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            yield train_set.batch(chunk)

    total_cycles = cfg.max_steps + cfg.min_steps
    for cycle in range(total_cycles):
        if cycle < cfg.max_steps and len(forget_positions) > 0:
            for images, labels in batches(forget_positions):
                mean_loss, grad_sum = net.loss_and_grad_sum(params, images, labels)
                if not np.isfinite(mean_loss):
                    raise UnlearningDivergedError(
                        f"scrub ascent diverged in cycle {cycle}", params)
                params = params + cfg.ascent_learning_rate * grad_sum / len(images)
        for images, labels in batches(retain_positions):
            teacher_probs = _soft_targets(net.logits(teacher, images),
                                          cfg.temperature)
            loss, grad = _distill_step(net, params, images, labels,
                                       teacher_probs, cfg.temperature, True)
            if not np.isfinite(loss):
                raise UnlearningDivergedError(
                    f"scrub distillation diverged in cycle {cycle}", params)
            params = params - cfg.learning_rate * grad
    return ckpt.with_params(params)


def bad_teacher(ckpt: Checkpoint, train_set: Dataset, forget: ForgetSet,
                cfg: BadTeacherConfig) -> Checkpoint:
    """Distill retain rows toward the original model, forget rows toward noise."""
    retain_positions, forget_positions = _split(train_set, forget)
    net = network_for(ckpt.arch)
    params = ckpt.params.copy()
    good = ckpt.params
    bad = net.init_params(int(rng(cfg.seed, 0xBAD).integers(2**31 - 1)))
    forget_mask = np.zeros(len(train_set), dtype=bool)
    forget_mask[forget_positions] = True
    shuffle = rng(cfg.seed, 0x5B)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train_set))
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            images, labels = train_set.batch(chunk)
            teacher_logits = np.where(forget_mask[chunk][:, None],
                                      net.logits(bad, images),
                                      net.logits(good, images))
            teacher_probs = _soft_targets(teacher_logits, cfg.temperature)
            loss, grad = _distill_step(net, params, images, labels,
                                       teacher_probs, cfg.temperature, False)
            if not np.isfinite(loss):
                raise UnlearningDivergedError(
                    f"bad-teacher distillation diverged in epoch {epoch}", params)
            params = params - cfg.learning_rate * grad
    return ckpt.with_params(params)


def soft_targets(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Tempered softmax; at temperature 1 this is the plain softmax."""
    return _soft_targets(logits, temperature)


@dataclass(frozen=True)
class UnlearnResult:
    method: str
    config: dict
    before: dict  # {"psr": float, "test_accuracy": float}
    after: dict
    wall_time_s: float
    checkpoint_before: str
    checkpoint_after: str
    forget_size: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "config": self.config,
                           "before": self.before, "after": self.after,
                           "wall_time_s": self.wall_time_s,
                           "checkpoint_before": self.checkpoint_before,
                           "checkpoint_after": self.checkpoint_after,
                           "forget_size": self.forget_size,
                           "extra": self.extra}, indent=2)

    @staticmethod
    def from_json(text: str) -> "UnlearnResult":
        d = json.loads(text)
        return UnlearnResult(d["method"], d["config"], d["before"], d["after"],
                             d["wall_time_s"], d["checkpoint_before"],
                             d["checkpoint_after"], d.get("forget_size", 0),
                             d.get("extra", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())
